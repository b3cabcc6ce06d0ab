//! The differential loss and the DIVA attack loop.
//!
//! DIVA maximizes `P_orig(x)[y] - c * P_adapted(x)[y]` inside the L-infinity
//! ball: the perturbation lowers the adapted model's confidence in the true
//! label while keeping the original model's. The optional targeted term
//! additionally pulls the adapted model's output distribution toward a one-hot
//! vector on the target class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::ModelPair;
use crate::attack::{ascend, check_sample, uniform_start, AttackConfig, ScoreMode, Trajectory};
use crate::error::{DivaError, Result};
use crate::nn::loss::{class_probability, softmax_row};
use crate::nn::model::{Batch, Classifier};
use crate::tensor::Tensor;

/// Weights of the differential objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivaObjective {
    pub c: f32,
    pub target: Option<usize>,
    pub target_weight: f32,
}

impl DivaObjective {
    pub fn untargeted(c: f32) -> Self {
        DivaObjective {
            c,
            target: None,
            target_weight: 0.0,
        }
    }
}

/// Outcome of one DIVA attack, judged on the pair it was generated against.
#[derive(Clone, Debug, PartialEq)]
pub struct DivaResult {
    pub adversarial: Tensor,
    pub loss_trace: Vec<f32>,
    pub iterates: Vec<Tensor>,
    pub original_pred: usize,
    pub adapted_pred: usize,
    /// Adapted model mispredicts the adversarial sample.
    pub attack_success: bool,
    /// Attack success while the original model still predicts the label.
    pub evasive_success: bool,
    /// For targeted runs: evasive and the adapted model outputs the target.
    pub targeted_success: Option<bool>,
}

/// Score of class `y` (probability or logit) and its logit gradient.
fn score_and_grad(logits: &Tensor, y: usize, mode: ScoreMode) -> (f64, Vec<f64>) {
    match mode {
        ScoreMode::Probability => class_probability(logits, y),
        ScoreMode::Logit => {
            let mut g = vec![0.0; logits.len()];
            g[y] = 1.0;
            (logits.data()[y] as f64, g)
        }
    }
}

fn to_tensor(shape: &[usize], g: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), g.into_iter().map(|v| v as f32).collect()).expect("logit shape")
}

/// `P_orig(x)[y] - c * P_adapted(x)[y]` with post-softmax probabilities.
pub fn diva_loss(pair: &ModelPair, x: &Tensor, y: usize, c: f32) -> Result<f32> {
    check_sample(pair.original(), x, y)?;
    let (po, _) = class_probability(&pair.original().logits(x)?, y);
    if c == 0.0 {
        return Ok(po as f32);
    }
    let (pa, _) = class_probability(&pair.adapted().logits(x)?, y);
    Ok((po - c as f64 * pa) as f32)
}

/// Value and input gradient of the (optionally targeted) DIVA loss.
///
/// One reverse pass per model, combined with weights `(1, -c)`. With `c = 0`
/// and no target term the adapted model is never evaluated.
pub fn diva_loss_grad(
    pair: &ModelPair,
    x: &Tensor,
    y: usize,
    objective: &DivaObjective,
    mode: ScoreMode,
) -> Result<(f32, Tensor)> {
    differential_grad(pair.original(), pair.adapted(), x, y, objective, mode)
}

pub(crate) fn differential_grad(
    orig: &dyn Classifier,
    adapted: &dyn Classifier,
    x: &Tensor,
    y: usize,
    objective: &DivaObjective,
    mode: ScoreMode,
) -> Result<(f32, Tensor)> {
    let (lo, tape_o) = orig.forward(x, true)?;
    let (so, go) = score_and_grad(&lo, y, mode);
    let mut grad = orig
        .backward(tape_o.as_ref().expect("recorded"), &to_tensor(lo.shape(), go), false)?
        .input;
    let mut value = so;

    let target_term = objective.target.filter(|_| objective.target_weight != 0.0);
    if objective.c == 0.0 && target_term.is_none() {
        return Ok((value as f32, grad));
    }
    let (la, tape_a) = adapted.forward(x, true)?;
    let (sa, ga) = score_and_grad(&la, y, mode);
    let c = objective.c as f64;
    value -= c * sa;
    let mut seed: Vec<f64> = ga.iter().map(|g| -c * g).collect();
    if let Some(t) = target_term {
        let w = objective.target_weight as f64;
        let p = softmax_row(la.row_slice(0));
        // d/dz of ||p - e_t||^2 is J^T (2 (p - e_t)) with J = diag(p) - p p^T
        let diff: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| pk - if k == t { 1.0 } else { 0.0 })
            .collect();
        value -= w * diff.iter().map(|d| d * d).sum::<f64>();
        let gp: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
        let dot: f64 = gp.iter().zip(&p).map(|(g, pk)| g * pk).sum();
        for (j, s) in seed.iter_mut().enumerate() {
            *s -= w * p[j] * (gp[j] - dot);
        }
    }
    let ga = adapted
        .backward(tape_a.as_ref().expect("recorded"), &to_tensor(la.shape(), seed), false)?
        .input;
    grad.add_scaled(&ga, 1.0);
    Ok((value as f32, grad))
}

fn judge(pair: &ModelPair, y: usize, target: Option<usize>, t: Trajectory) -> Result<DivaResult> {
    let original_pred = pair.original().predict(&t.adversarial)?[0];
    let adapted_pred = pair.adapted().predict(&t.adversarial)?[0];
    let attack_success = adapted_pred != y;
    let evasive_success = attack_success && original_pred == y;
    Ok(DivaResult {
        adversarial: t.adversarial,
        loss_trace: t.loss_trace,
        iterates: t.iterates,
        original_pred,
        adapted_pred,
        attack_success,
        evasive_success,
        targeted_success: target.map(|t| evasive_success && adapted_pred == t),
    })
}

fn run(
    pair: &ModelPair,
    x: &Tensor,
    y: usize,
    objective: &DivaObjective,
    cfg: &AttackConfig,
) -> Result<DivaResult> {
    cfg.validate()?;
    check_sample(pair.original(), x, y)?;
    let po = pair.original().predict(x)?[0];
    let pa = pair.adapted().predict(x)?[0];
    if po != y || pa != y {
        return Err(DivaError::Rejected(format!(
            "sample with label {y} is not classified correctly by both models (original {po}, adapted {pa})"
        )));
    }
    let t = perturb(pair.original(), pair.adapted(), x, y, objective, cfg)?;
    judge(pair, y, objective.target, t)
}

/// The DIVA ascent without the joint-correctness precondition.
pub(crate) fn perturb(
    orig: &dyn Classifier,
    adapted: &dyn Classifier,
    x: &Tensor,
    y: usize,
    objective: &DivaObjective,
    cfg: &AttackConfig,
) -> Result<Trajectory> {
    let start = if cfg.random_start {
        uniform_start(x, cfg.epsilon, cfg.seed)?
    } else {
        x.clone()
    };
    ascend(
        x,
        start,
        cfg,
        None,
        |xt| differential_grad(orig, adapted, xt, y, objective, cfg.score),
        |xt| {
            let a = adapted.predict(xt)?[0];
            let o = orig.predict(xt)?[0];
            Ok(match objective.target {
                Some(t) => a == t && o == y,
                None => a != y && o == y,
            })
        },
    )
}

/// Whitebox DIVA: PGD on the differential loss with weight `cfg.c`.
///
/// Samples that either model misclassifies are rejected with
/// [`DivaError::Rejected`].
pub fn diva_attack(pair: &ModelPair, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<DivaResult> {
    run(pair, x, y, &DivaObjective::untargeted(cfg.c), cfg)
}

/// Targeted DIVA: the differential loss minus
/// `target_weight * ||P_adapted - onehot(target)||^2`.
pub fn diva_targeted(
    pair: &ModelPair,
    x: &Tensor,
    y: usize,
    objective: &DivaObjective,
    cfg: &AttackConfig,
) -> Result<DivaResult> {
    let target = objective
        .target
        .ok_or_else(|| DivaError::InvalidArgument("targeted attack without a target".into()))?;
    if target == y {
        return Err(DivaError::InvalidArgument(
            "target class equals the true label".into(),
        ));
    }
    if target >= pair.num_classes() {
        return Err(DivaError::InvalidLabel {
            label: target,
            num_classes: pair.num_classes(),
        });
    }
    if !(objective.target_weight >= 0.0) {
        return Err(DivaError::InvalidArgument("target weight must be >= 0".into()));
    }
    run(pair, x, y, objective, cfg)
}

/// One row of a c-ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: f32,
    pub n_samples: usize,
    pub evasive_rate: f64,
    pub attack_rate: f64,
}

/// Indices of samples both models of the pair classify correctly.
pub(crate) fn jointly_correct(pair: &ModelPair, data: &Batch) -> Result<Vec<usize>> {
    let po = crate::nn::train::predict_batched(pair.original(), &data.inputs)?;
    let pa = crate::nn::train::predict_batched(pair.adapted(), &data.inputs)?;
    Ok((0..data.len())
        .filter(|&i| po[i] == data.labels[i] && pa[i] == data.labels[i])
        .collect())
}

/// Runs whitebox DIVA over the jointly-correct samples of `data` for each `c`.
pub fn sweep_c(
    pair: &ModelPair,
    data: &Batch,
    cfg: &AttackConfig,
    c_values: &[f32],
) -> Result<Vec<SweepRow>> {
    if c_values.is_empty() {
        return Err(DivaError::InvalidArgument("no c values to sweep".into()));
    }
    if let Some(bad) = c_values.iter().find(|c| !(**c >= 0.0)) {
        return Err(DivaError::InvalidArgument(format!("c must be >= 0, got {bad}")));
    }
    let keep = jointly_correct(pair, data)?;
    if keep.is_empty() {
        return Err(DivaError::EmptyDataset(
            "no sample is classified correctly by both models".into(),
        ));
    }
    c_values
        .iter()
        .map(|&c| {
            let run_cfg = AttackConfig {
                c,
                ..cfg.clone()
            };
            let results: Vec<Result<DivaResult>> = keep
                .par_iter()
                .map(|&i| diva_attack(pair, &data.inputs.sample(i), data.labels[i], &run_cfg))
                .collect();
            let mut evasive = 0;
            let mut attack = 0;
            for r in results {
                let r = r?;
                evasive += r.evasive_success as usize;
                attack += r.attack_success as usize;
            }
            let n = keep.len() as f64;
            Ok(SweepRow {
                c,
                n_samples: keep.len(),
                evasive_rate: evasive as f64 / n,
                attack_rate: attack as f64 / n,
            })
        })
        .collect()
}
