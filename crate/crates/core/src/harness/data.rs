//! Datasets: IDX ingestion, seeded synthetic images, splits and filtering.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DivaError, Result};
use crate::nn::model::{Batch, Classifier};
use crate::nn::train::predict_batched;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Transfer,
    Validation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub split: Split,
    pub data: Batch,
    pub num_classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.data.inputs.shape()[1..]
    }

    /// A new dataset holding the given samples.
    pub fn subset(&self, indices: &[usize], id: &str, split: Split) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(DivaError::EmptyDataset(format!("subset '{id}' has no samples")));
        }
        Ok(Dataset {
            id: id.into(),
            split,
            data: self.data.gather(indices),
            num_classes: self.num_classes,
            provenance: format!("{}[{} samples]", self.id, indices.len()),
        })
    }

    /// Splits consecutive ranges of the given sizes into train/transfer/validation.
    pub fn split3(&self, train: usize, transfer: usize, validation: usize) -> Result<(Dataset, Dataset, Dataset)> {
        if train + transfer + validation > self.len() {
            return Err(DivaError::Data(format!(
                "requested {} samples from a dataset of {}",
                train + transfer + validation,
                self.len()
            )));
        }
        let r = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
        Ok((
            self.subset(&r(0, train), &format!("{}/train", self.id), Split::Train)?,
            self.subset(
                &r(train, train + transfer),
                &format!("{}/transfer", self.id),
                Split::Transfer,
            )?,
            self.subset(
                &r(train + transfer, train + transfer + validation),
                &format!("{}/validation", self.id),
                Split::Validation,
            )?,
        ))
    }

    /// SHA-256 of each sample's pixel bytes.
    pub fn sample_hashes(&self) -> Vec<[u8; 32]> {
        (0..self.len())
            .map(|i| {
                let s = self.data.inputs.sample(i);
                let mut out = [0u8; 32];
                out.copy_from_slice(&Sha256::digest(s.to_le_bytes()));
                out
            })
            .collect()
    }
}

/// Fails if any sample of `a` also appears in `b`.
pub fn ensure_disjoint(a: &Dataset, b: &Dataset) -> Result<()> {
    let seen: BTreeSet<[u8; 32]> = a.sample_hashes().into_iter().collect();
    let overlap = b.sample_hashes().iter().filter(|h| seen.contains(*h)).count();
    if overlap > 0 {
        return Err(DivaError::Data(format!(
            "datasets '{}' and '{}' share {overlap} samples",
            a.id, b.id
        )));
    }
    Ok(())
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DivaError::Data(format!("truncated {what} header")))
}

/// Parses IDX ubyte image and label payloads.
pub fn parse_idx(images: &[u8], labels: &[u8], id: &str) -> Result<Dataset> {
    let magic = be_u32(images, 0, "image")?;
    if magic != IDX_IMAGES {
        return Err(DivaError::Data(format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(images, 4, "image")? as usize;
    let rows = be_u32(images, 8, "image")? as usize;
    let cols = be_u32(images, 12, "image")? as usize;
    let lmagic = be_u32(labels, 0, "label")?;
    if lmagic != IDX_LABELS {
        return Err(DivaError::Data(format!("bad label magic {lmagic:#010x}")));
    }
    let ln = be_u32(labels, 4, "label")? as usize;
    if ln != n {
        return Err(DivaError::Data(format!(
            "label count {ln} does not match image count {n}"
        )));
    }
    let pixels = &images[16..];
    if pixels.len() < n * rows * cols {
        return Err(DivaError::Data("truncated image payload".into()));
    }
    let lab = &labels[8..];
    if lab.len() < n {
        return Err(DivaError::Data("truncated label payload".into()));
    }
    if n == 0 {
        return Err(DivaError::EmptyDataset(format!("IDX set '{id}' is empty")));
    }
    let inputs = Tensor::new(
        vec![n, rows, cols, 1],
        pixels[..n * rows * cols]
            .iter()
            .map(|&p| p as f32 / 255.0)
            .collect(),
    )?;
    let labels: Vec<usize> = lab[..n].iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Ok(Dataset {
        id: id.into(),
        split: Split::Validation,
        data: Batch::new(inputs, labels)?,
        num_classes,
        provenance: format!("idx:{id}"),
    })
}

/// Loads an IDX image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = std::fs::read(images)?;
    let lab = std::fs::read(labels)?;
    parse_idx(&img, &lab, &images.display().to_string())
}

/// Encodes single-channel images in `[0, 1]` and labels as IDX payloads.
pub fn encode_idx(data: &Batch) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = data.inputs.shape();
    if s.len() != 4 || s[3] != 1 {
        return Err(DivaError::Data("IDX export needs [n, h, w, 1] images".into()));
    }
    let mut img = Vec::new();
    for v in [IDX_IMAGES, s[0] as u32, s[1] as u32, s[2] as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.inputs.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(s[0] as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

/// Parameters of the synthetic grating generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub side: usize,
    /// Grating amplitude around the 0.5 grey level.
    pub amplitude: f32,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f32,
    /// Maximum absolute per-sample phase jitter, radians.
    pub phase_jitter: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            side: 16,
            amplitude: 0.05,
            noise: 0.08,
            phase_jitter: 0.5,
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Seeded class-conditioned oriented gratings plus Gaussian noise.
pub fn synth_dataset(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    synth_dataset_with(seed, n, classes, &SynthConfig::default())
}

pub fn synth_dataset_with(seed: u64, n: usize, classes: usize, cfg: &SynthConfig) -> Result<Dataset> {
    if classes < 2 {
        return Err(DivaError::InvalidArgument(format!(
            "need at least two classes, got {classes}"
        )));
    }
    if n < classes {
        return Err(DivaError::InvalidArgument(format!(
            "need at least one sample per class ({n} < {classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let side = cfg.side;
    let mut data = Vec::with_capacity(n * side * side);
    for &k in &labels {
        let theta = std::f32::consts::PI * k as f32 / classes as f32;
        let freq = if k % 2 == 0 { 2.0 } else { 3.0 };
        let base_phase = 0.7 * k as f32;
        let phase = base_phase + rng.gen_range(-cfg.phase_jitter..=cfg.phase_jitter);
        let amp = cfg.amplitude * rng.gen_range(0.8f32..1.2);
        let (s, c) = theta.sin_cos();
        for i in 0..side {
            for j in 0..side {
                let u = (c * j as f32 + s * i as f32) / side as f32;
                let v = 0.5
                    + amp * (std::f32::consts::TAU * freq * u + phase).sin()
                    + cfg.noise * gaussian(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let inputs = Tensor::new(vec![n, side, side, 1], data)?;
    Ok(Dataset {
        id: format!("synth-{seed}-{n}-{classes}"),
        split: Split::Train,
        data: Batch::new(inputs, labels)?,
        num_classes: classes,
        provenance: format!("synth(seed={seed}, n={n}, classes={classes}, {cfg:?})"),
    })
}

/// A dataset restricted to samples every model classifies correctly.
#[derive(Clone, Debug)]
pub struct Filtered {
    pub dataset: Dataset,
    /// Indices into the unfiltered dataset.
    pub kept: Vec<usize>,
    pub retention: f64,
}

/// Keeps the samples that all `models` classify correctly.
pub fn filter_correct(models: &[&dyn Classifier], dataset: &Dataset) -> Result<Filtered> {
    if dataset.is_empty() {
        return Err(DivaError::EmptyDataset(format!("'{}' is empty", dataset.id)));
    }
    let mut ok = vec![true; dataset.len()];
    for m in models {
        let preds = predict_batched(*m, &dataset.data.inputs)?;
        for (i, (p, y)) in preds.iter().zip(&dataset.data.labels).enumerate() {
            ok[i] &= p == y;
        }
    }
    let kept: Vec<usize> = (0..dataset.len()).filter(|&i| ok[i]).collect();
    if kept.is_empty() {
        return Err(DivaError::EmptyDataset(format!(
            "no sample of '{}' is classified correctly by every model",
            dataset.id
        )));
    }
    let retention = kept.len() as f64 / dataset.len() as f64;
    let filtered = dataset.subset(&kept, &format!("{}/filtered", dataset.id), dataset.split)?;
    Ok(Filtered {
        dataset: filtered,
        kept,
        retention,
    })
}
