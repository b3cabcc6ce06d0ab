//! Softmax, cross-entropy and the logit-space loss interface.

use crate::error::{DivaError, Result};
use crate::tensor::Tensor;

/// A scalar loss over a `[n, classes]` logit tensor, returning the value and
/// its gradient with respect to the logits.
pub trait LogitLoss: Sync {
    fn evaluate(&self, logits: &Tensor) -> Result<(f32, Tensor)>;
}

impl<F> LogitLoss for F
where
    F: Fn(&Tensor) -> Result<(f32, Tensor)> + Sync,
{
    fn evaluate(&self, logits: &Tensor) -> Result<(f32, Tensor)> {
        self(logits)
    }
}

fn softmax_row_f64(z: &[f32], temperature: f64) -> Vec<f64> {
    let max = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = z
        .iter()
        .map(|&v| ((v as f64 - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_probs(logits: &Tensor) -> Tensor {
    softmax_with_temperature(logits, 1.0)
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_with_temperature(logits: &Tensor, temperature: f32) -> Tensor {
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        out.extend(
            softmax_row_f64(row, temperature as f64)
                .into_iter()
                .map(|p| p as f32),
        );
    }
    Tensor::new(logits.shape().to_vec(), out).expect("softmax preserves shape")
}

pub(crate) fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    for &label in labels {
        if label >= num_classes {
            return Err(DivaError::InvalidLabel { label, num_classes });
        }
    }
    Ok(())
}

/// Sum over rows of `-log softmax(z)[y]`, with the gradient of that sum.
pub(crate) fn cross_entropy_sum(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.batch_size();
    let k = logits.shape()[1];
    if labels.len() != n {
        return Err(DivaError::ShapeMismatch {
            at: "cross_entropy labels".into(),
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    check_labels(labels, k)?;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let p = softmax_row_f64(row, 1.0);
        total += -p[y].max(f64::MIN_POSITIVE).ln();
        for (j, pj) in p.iter().enumerate() {
            grad.push((pj - if j == y { 1.0 } else { 0.0 }) as f32);
        }
    }
    Ok((total, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean cross-entropy of a logit batch against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let (sum, _) = cross_entropy_sum(logits, labels)?;
    Ok((sum / logits.batch_size() as f64) as f32)
}

/// Mean cross-entropy as a [`LogitLoss`].
pub struct CrossEntropy<'a> {
    pub labels: &'a [usize],
}

impl LogitLoss for CrossEntropy<'_> {
    fn evaluate(&self, logits: &Tensor) -> Result<(f32, Tensor)> {
        let (sum, mut grad) = cross_entropy_sum(logits, self.labels)?;
        let n = logits.batch_size() as f32;
        grad.scale(1.0 / n);
        Ok(((sum / n as f64) as f32, grad))
    }
}

/// Gradient of `softmax(z)[y]` with respect to `z` for one row.
pub(crate) fn prob_grad_row(p: &[f64], y: usize) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(j, &pj)| p[y] * (if j == y { 1.0 } else { 0.0 } - pj))
        .collect()
}

/// Probability of class `y` for a single-row logit tensor and its logit gradient.
pub(crate) fn class_probability(logits: &Tensor, y: usize) -> (f64, Vec<f64>) {
    let p = softmax_row_f64(logits.row_slice(0), 1.0);
    let g = prob_grad_row(&p, y);
    (p[y], g)
}

pub(crate) fn softmax_row(z: &[f32]) -> Vec<f64> {
    softmax_row_f64(z, 1.0)
}
