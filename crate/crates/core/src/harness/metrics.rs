//! Attack evaluation: success metrics, evasion cost, confidence and DSSIM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{instability, ModelPair};
use crate::attack::{run_single, AttackConfig, AttackVariant};
use crate::diva::diva_attack;
use crate::error::{DivaError, Result};
use crate::harness::data::{filter_correct, Dataset};
use crate::harness::dssim::{dssim, DEFAULT_THRESHOLD};
use crate::nn::loss::class_probability;
use crate::nn::model::{argmax, rank_classes, Classifier};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub attack: AttackConfig,
    /// Evaluate at most this many filtered samples (first ones in order).
    pub max_samples: usize,
    pub dssim_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            attack: AttackConfig::default(),
            max_samples: 200,
            dssim_threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Index into the unfiltered dataset.
    pub index: usize,
    pub label: usize,
    pub original_pred: usize,
    pub adapted_pred: usize,
    pub original_top5: Vec<usize>,
    pub top1_evasive: bool,
    pub top5_evasive: bool,
    /// Adapted top-1 outside the original top-5, with no other condition.
    pub top5_loose: bool,
    pub attack_only: bool,
    pub original_confidence: f64,
    pub adapted_confidence: f64,
    pub confidence_delta: f64,
    pub dssim: f64,
    pub dssim_flagged: bool,
    pub linf: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub attack: AttackVariant,
    pub n_samples: usize,
    /// Fraction of the raw dataset every model classifies correctly.
    pub retention: f64,
    pub top1_evasive_rate: f64,
    pub top5_evasive_rate: f64,
    pub top5_loose_rate: f64,
    pub attack_only_rate: f64,
    pub confidence_delta_mean: f64,
    /// Instability of the judged pair on the raw dataset.
    pub instability: f64,
    pub dssim_max: f64,
    pub dssim_mean: f64,
    pub dssim_threshold: f64,
    pub dssim_flagged: usize,
    pub config_hash: String,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
}

/// Hash over the evaluation config, both pairs' digests and the dataset.
pub fn evaluation_hash(pair: &ModelPair, eval_pair: &ModelPair, dataset: &Dataset, cfg: &EvalConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    for d in [
        pair.original().digest(),
        pair.adapted().digest(),
        eval_pair.original().digest(),
        eval_pair.adapted().digest(),
    ] {
        h.update(d.as_bytes());
    }
    for s in dataset.sample_hashes() {
        h.update(s);
    }
    h.update(
        dataset
            .data
            .labels
            .iter()
            .flat_map(|l| (*l as u64).to_le_bytes())
            .collect::<Vec<_>>(),
    );
    Ok(hex::encode(h.finalize()))
}

/// Generates the configured attack against `pair`.
fn generate(pair: &ModelPair, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<Tensor> {
    match cfg.variant {
        AttackVariant::Diva => Ok(diva_attack(pair, x, y, cfg)?.adversarial),
        AttackVariant::DivaTargeted => Err(DivaError::Config(
            "targeted DIVA needs a per-sample target and is not part of evaluation runs".into(),
        )),
        _ => Ok(run_single(pair.adapted(), x, y, cfg)?.adversarial),
    }
}

/// Judges one adversarial sample on `eval_pair`.
pub fn judge_sample(
    eval_pair: &ModelPair,
    index: usize,
    x: &Tensor,
    adv: &Tensor,
    y: usize,
    threshold: f64,
) -> Result<SampleRecord> {
    let lo = eval_pair.original().logits(adv)?;
    let la = eval_pair.adapted().logits(adv)?;
    let original_pred = argmax(lo.row_slice(0));
    let adapted_pred = argmax(la.row_slice(0));
    let original_top5: Vec<usize> = rank_classes(lo.row_slice(0)).into_iter().take(5).collect();
    let attack_only = adapted_pred != y;
    let top1_evasive = attack_only && original_pred == y;
    let top5_loose = !original_top5.contains(&adapted_pred);
    let (po, _) = class_probability(&lo, y);
    let (pa, _) = class_probability(&la, y);
    let d = dssim(&x.sample(0), &adv.sample(0))?;
    Ok(SampleRecord {
        index,
        label: y,
        original_pred,
        adapted_pred,
        original_top5,
        top1_evasive,
        top5_evasive: top1_evasive && top5_loose,
        top5_loose,
        attack_only,
        original_confidence: po,
        adapted_confidence: pa,
        confidence_delta: po - pa,
        dssim: d,
        dssim_flagged: d > threshold,
        linf: adv.linf_distance(x),
    })
}

/// Attack-and-judge loop over a dataset.
///
/// The dataset is filtered to samples all four models classify correctly;
/// the first `cfg.max_samples` survivors are attacked on `pair` (the
/// attacker's models) and judged on `eval_pair` (the deployed models).
/// Single-model attacks target `pair.adapted()`.
pub fn evaluate(pair: &ModelPair, eval_pair: &ModelPair, dataset: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    Ok(evaluate_full(pair, eval_pair, dataset, cfg)?.0)
}

/// [`evaluate`] that also returns the adversarial samples, one per record.
pub fn evaluate_full(
    pair: &ModelPair,
    eval_pair: &ModelPair,
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<Tensor>)> {
    cfg.attack.validate()?;
    if !(cfg.dssim_threshold >= 0.0) {
        return Err(DivaError::Config("dssim_threshold must be >= 0".into()));
    }
    if cfg.max_samples == 0 {
        return Err(DivaError::Config("max_samples must be positive".into()));
    }
    let models: [&dyn Classifier; 4] = [
        pair.original(),
        pair.adapted(),
        eval_pair.original(),
        eval_pair.adapted(),
    ];
    let filtered = filter_correct(&models, dataset)?;
    let n = filtered.dataset.len().min(cfg.max_samples);
    let data = &filtered.dataset.data;
    let results: Vec<Result<(SampleRecord, Tensor)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = data.inputs.sample(i);
            let y = data.labels[i];
            let adv = generate(pair, &x, y, &cfg.attack)?;
            let rec = judge_sample(eval_pair, filtered.kept[i], &x, &adv, y, cfg.dssim_threshold)?;
            Ok((rec, adv))
        })
        .collect();
    let (samples, adversarials): (Vec<SampleRecord>, Vec<Tensor>) =
        results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let rate = |f: fn(&SampleRecord) -> bool| samples.iter().filter(|s| f(s)).count() as f64 / n as f64;
    let dssim_max = samples.iter().map(|s| s.dssim).fold(0.0, f64::max);
    let report = MetricsReport {
        attack: cfg.attack.variant,
        n_samples: n,
        retention: filtered.retention,
        top1_evasive_rate: rate(|s| s.top1_evasive),
        top5_evasive_rate: rate(|s| s.top5_evasive),
        top5_loose_rate: rate(|s| s.top5_loose),
        attack_only_rate: rate(|s| s.attack_only),
        confidence_delta_mean: samples.iter().map(|s| s.confidence_delta).sum::<f64>() / n as f64,
        instability: instability(eval_pair, &dataset.data)?,
        dssim_max,
        dssim_mean: samples.iter().map(|s| s.dssim).sum::<f64>() / n as f64,
        dssim_threshold: cfg.dssim_threshold,
        dssim_flagged: samples.iter().filter(|s| s.dssim_flagged).count(),
        config_hash: evaluation_hash(pair, eval_pair, dataset, cfg)?,
        seed: cfg.attack.seed,
        samples,
    };
    Ok((report, adversarials))
}

/// Column names of [`samples_csv`].
pub const SAMPLE_COLUMNS: &str = "index,label,original_pred,adapted_pred,top1_evasive,top5_evasive,top5_loose,attack_only,original_confidence,adapted_confidence,confidence_delta,dssim,dssim_flagged,linf";

/// Per-sample records as CSV.
pub fn samples_csv(report: &MetricsReport) -> String {
    let mut out = String::from(SAMPLE_COLUMNS);
    out.push('\n');
    for s in &report.samples {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.index,
            s.label,
            s.original_pred,
            s.adapted_pred,
            s.top1_evasive as u8,
            s.top5_evasive as u8,
            s.top5_loose as u8,
            s.attack_only as u8,
            s.original_confidence,
            s.adapted_confidence,
            s.confidence_delta,
            s.dssim,
            s.dssim_flagged as u8,
            s.linf
        ));
    }
    out
}
