//! Knowledge distillation from a query-only teacher.

use serde::{Deserialize, Serialize};

use crate::adapt::{qat_train, AdaptedModel, ModelPair, QatConfig};
use crate::error::{DivaError, Result};
use crate::harness::data::{ensure_disjoint, Dataset};
use crate::nn::layer::Layer;
use crate::nn::loss::softmax_row;
use crate::nn::model::{argmax, Batch, Classifier, Model};
use crate::nn::train::{run_epochs, summed_param_grads, Sgd, TrainConfig, TrainReport};
use crate::surrogate::{QueryOracle, Teacher};
use crate::tensor::Tensor;

/// Teacher queries are sent in batches of this many samples.
const QUERY_BATCH: usize = 256;
/// Added to teacher probabilities before taking logs.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub temperature: f32,
    /// Weight of the hard-label term; `1 - mix_lambda` weighs the soft term.
    pub mix_lambda: f32,
    /// Maximum number of transfer samples sent to the teacher.
    pub query_budget: Option<usize>,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 4.0,
            mix_lambda: 0.5,
            query_budget: None,
            train: TrainConfig {
                lr: 0.02,
                epochs: 10,
                batch_size: 32,
                momentum: 0.9,
                seed: 11,
                early_stop: None,
            },
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DivaError::Config(format!(
                "distillation temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_lambda) {
            return Err(DivaError::Config(format!(
                "mix_lambda must lie in [0, 1], got {}",
                self.mix_lambda
            )));
        }
        if self.query_budget == Some(0) {
            return Err(DivaError::Config("query budget of zero samples".into()));
        }
        self.train.validate()
    }
}

/// Attacker-side transfer data, checked disjoint from the victim's training set.
#[derive(Clone, Debug)]
pub struct TransferSet {
    data: Dataset,
}

impl TransferSet {
    pub fn new(transfer: Dataset, victim_train: &Dataset) -> Result<Self> {
        if transfer.is_empty() {
            return Err(DivaError::EmptyDataset("transfer set".into()));
        }
        ensure_disjoint(victim_train, &transfer)?;
        Ok(TransferSet { data: transfer })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn inputs(&self) -> &Tensor {
        &self.data.data.inputs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// Samples sent to the teacher.
    pub queries: usize,
    pub train: TrainReport,
    /// Fraction of queried samples where student and teacher top-1 agree.
    pub agreement: f64,
}

/// Summed distillation loss over rows and its logit gradient.
///
/// Per row: `lambda * CE(z, argmax p) + (1 - lambda) * T^2 * KL(p_T || q_T)`
/// where `p_T = softmax(log(p + 1e-12) / T)` and `q_T = softmax(z / T)`.
pub fn distillation_loss(
    student_logits: &Tensor,
    teacher_probs: &Tensor,
    temperature: f32,
    mix_lambda: f32,
) -> Result<(f64, Tensor)> {
    student_logits.ensure_same_shape(teacher_probs, "distillation targets")?;
    let t = temperature as f64;
    let lam = mix_lambda as f64;
    let n = student_logits.batch_size();
    let k = student_logits.sample_len();
    let mut grad = vec![0.0f32; n * k];
    let mut total = 0.0;
    for r in 0..n {
        let z = student_logits.row_slice(r);
        let p = teacher_probs.row_slice(r);
        let hard = argmax(p);
        let q = softmax_row(z);
        let scaled: Vec<f32> = z.iter().map(|&v| (v as f64 / t) as f32).collect();
        let qt = softmax_row(&scaled);
        let teacher_logits: Vec<f32> = p
            .iter()
            .map(|&v| ((v as f64 + LOG_FLOOR).ln() / t) as f32)
            .collect();
        let pt = softmax_row(&teacher_logits);
        let ce = -q[hard].max(f64::MIN_POSITIVE).ln();
        let kl: f64 = pt
            .iter()
            .zip(&qt)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| a * (a.ln() - b.max(f64::MIN_POSITIVE).ln()))
            .sum();
        total += lam * ce + (1.0 - lam) * t * t * kl;
        for j in 0..k {
            let onehot = if j == hard { 1.0 } else { 0.0 };
            grad[r * k + j] = (lam * (q[j] - onehot) + (1.0 - lam) * t * (qt[j] - pt[j])) as f32;
        }
    }
    Ok((total, Tensor::new(student_logits.shape().to_vec(), grad)?))
}

fn check_probs(probs: &Tensor, n: usize, classes: usize) -> Result<()> {
    if probs.shape() != [n, classes] {
        return Err(DivaError::Data(format!(
            "teacher returned shape {:?}, expected [{n}, {classes}]",
            probs.shape()
        )));
    }
    for r in 0..n {
        let row = probs.row_slice(r);
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || (sum - 1.0).abs() > 1e-3 {
            return Err(DivaError::Data(format!(
                "teacher row {r} is not a probability vector"
            )));
        }
    }
    Ok(())
}

/// Queries the teacher on the first `budget` transfer samples.
fn query_all(teacher: &dyn Teacher, inputs: &Tensor, budget: Option<usize>, classes: usize) -> Result<(Tensor, Tensor)> {
    let n = budget.map_or(inputs.batch_size(), |b| b.min(inputs.batch_size()));
    if n == 0 {
        return Err(DivaError::EmptyDataset("no teacher predictions to distill from".into()));
    }
    let x = inputs.slice_batch(0, n);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + QUERY_BATCH).min(n);
        let p = teacher.query(&x.slice_batch(start, end))?;
        check_probs(&p, end - start, classes)?;
        parts.push(p);
        start = end;
    }
    Ok((x, Tensor::stack(&parts)?))
}

/// Trains a copy of `student` against fixed teacher probabilities.
pub fn distill_from_probs(
    student: &Model,
    inputs: &Tensor,
    teacher_probs: &Tensor,
    cfg: &DistillConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let n = inputs.batch_size();
    if n == 0 {
        return Err(DivaError::EmptyDataset("no teacher predictions to distill from".into()));
    }
    check_probs(teacher_probs, n, student.num_classes())?;
    let mut model = student.clone();
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum);
    let report = run_epochs(n, &cfg.train, |_, idx| {
        let x = inputs.gather(idx);
        let p = teacher_probs.gather(idx);
        let (sum, mut grads) = summed_param_grads(&model, &x, |off, logits| {
            let rows = logits.batch_size();
            distillation_loss(logits, &p.slice_batch(off, off + rows), cfg.temperature, cfg.mix_lambda)
        })?;
        let m = idx.len() as f32;
        for g in grads.values_mut() {
            g.scale(1.0 / m);
        }
        opt.step(model.params_mut(), &grads);
        Ok(sum / m as f64)
    })?;
    Ok((model, report))
}

fn agreement(student: &Model, inputs: &Tensor, probs: &Tensor) -> Result<f64> {
    let preds = crate::nn::train::predict_batched(student, inputs)?;
    let n = preds.len();
    let agree = (0..n).filter(|&i| preds[i] == argmax(probs.row_slice(i))).count();
    Ok(agree as f64 / n as f64)
}

/// Distills `student` from a teacher's outputs on the transfer set.
pub fn distill(
    teacher: &dyn Teacher,
    student: &Model,
    transfer: &TransferSet,
    cfg: &DistillConfig,
) -> Result<(Model, DistillReport)> {
    cfg.validate()?;
    let (x, probs) = query_all(teacher, transfer.inputs(), cfg.query_budget, student.num_classes())?;
    let (model, train) = distill_from_probs(student, &x, &probs, cfg)?;
    let agreement = agreement(&model, &x, &probs)?;
    Ok((
        model,
        DistillReport {
            queries: x.batch_size(),
            train,
            agreement,
        },
    ))
}

/// Semi-blackbox surrogate pair: a full-precision student distilled from the
/// adapted model, starting from its dequantized weights, paired with the
/// adapted model itself.
pub fn build_semi_blackbox(
    adapted: &AdaptedModel,
    transfer: &TransferSet,
    cfg: &DistillConfig,
) -> Result<(ModelPair, DistillReport)> {
    let oracle = QueryOracle::new(adapted);
    let (student, report) = distill(&oracle, adapted.base(), transfer, cfg)?;
    Ok((ModelPair::new(student, adapted.clone())?, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlackboxConfig {
    pub distill: DistillConfig,
    pub qat: QatConfig,
    /// Seed of the surrogate's fresh initialisation.
    pub init_seed: u64,
}

impl Default for BlackboxConfig {
    fn default() -> Self {
        BlackboxConfig {
            distill: DistillConfig::default(),
            qat: QatConfig::default(),
            init_seed: 23,
        }
    }
}

/// Blackbox surrogate pair from query access alone.
///
/// A freshly initialised model of the given architecture is distilled from
/// the teacher; a surrogate adapted model is then quantization-aware trained
/// from it on the teacher's top-1 labels.
pub fn build_blackbox(
    teacher: &dyn Teacher,
    input_shape: &[usize],
    layers: Vec<Layer>,
    transfer: &TransferSet,
    cfg: &BlackboxConfig,
) -> Result<(ModelPair, DistillReport)> {
    cfg.distill.validate()?;
    let init = Model::new(input_shape, layers, cfg.init_seed)?;
    let (x, probs) = query_all(teacher, transfer.inputs(), cfg.distill.query_budget, init.num_classes())?;
    let (student, train) = distill_from_probs(&init, &x, &probs, &cfg.distill)?;
    let labels: Vec<usize> = (0..x.batch_size()).map(|i| argmax(probs.row_slice(i))).collect();
    let adapted = qat_train(&student, &Batch::new(x.clone(), labels)?, &cfg.qat)?;
    let agreement = agreement(&student, &x, &probs)?;
    Ok((
        ModelPair::new(student, adapted)?,
        DistillReport {
            queries: x.batch_size(),
            train,
            agreement,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_term_vanishes_when_student_matches_teacher() {
        let z = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.3, -0.2]).unwrap();
        let p = crate::nn::loss::softmax_probs(&z);
        let (loss, g) = distillation_loss(&z, &p, 4.0, 0.0).unwrap();
        assert!(loss.abs() < 1e-6, "{loss}");
        assert!(g.data().iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn hard_term_is_cross_entropy() {
        let z = Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.5]).unwrap();
        let p = Tensor::new(vec![1, 3], vec![0.7, 0.2, 0.1]).unwrap();
        let (loss, _) = distillation_loss(&z, &p, 4.0, 1.0).unwrap();
        let ce = crate::nn::loss::cross_entropy(&z, &[0]).unwrap() as f64;
        assert!((loss - ce).abs() < 1e-5);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let cfg = DistillConfig {
            query_budget: Some(0),
            ..DistillConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
