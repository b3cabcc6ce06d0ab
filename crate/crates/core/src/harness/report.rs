//! Output encoders: binary PGM images, CSV tables and atomic file writes.

use std::path::Path;

use crate::diva::SweepRow;
use crate::error::{DivaError, Result};
use crate::harness::metrics::MetricsReport;
use crate::tensor::Tensor;

/// Binary greyscale PGM (`P5`, maxval 255) of an `[h, w, c]` or
/// `[1, h, w, c]` image in `[0, 1]`; channels are averaged.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match image.shape() {
        [h, w, c] | [1, h, w, c] => (*h, *w, *c),
        s => {
            return Err(DivaError::InvalidArgument(format!(
                "PGM export expects an image tensor, got shape {s:?}"
            )))
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for px in image.data().chunks(c.max(1)) {
        let v = px.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| DivaError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub const SWEEP_COLUMNS: &str = "c,n_samples,evasive_rate,attack_only_rate";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_COLUMNS}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.c, r.n_samples, r.evasive_rate, r.attack_rate));
    }
    out
}

pub const SUMMARY_COLUMNS: &str = "run,attack,n_samples,top1_evasive_rate,top5_evasive_rate,top5_loose_rate,attack_only_rate,confidence_delta_mean,instability,dssim_mean,dssim_max,dssim_flagged,retention";

/// One plot-ready row per named report.
pub fn summary_csv(runs: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{SUMMARY_COLUMNS}\n");
    for (name, r) in runs {
        let attack = serde_json::to_value(r.attack)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            name.replace(',', "_"),
            attack,
            r.n_samples,
            r.top1_evasive_rate,
            r.top5_evasive_rate,
            r.top5_loose_rate,
            r.attack_only_rate,
            r.confidence_delta_mean,
            r.instability,
            r.dssim_mean,
            r.dssim_max,
            r.dssim_flagged,
            r.retention
        ));
    }
    out
}
