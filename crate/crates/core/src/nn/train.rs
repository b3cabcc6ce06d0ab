//! Mini-batch SGD and the shared epoch driver.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DivaError, Result};
use crate::nn::loss::cross_entropy_sum;
use crate::nn::model::{Batch, Classifier, Model, Params};
use crate::tensor::Tensor;

/// Samples per parallel work unit. Fixed so that gradient sums do not depend
/// on the worker count.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStop {
    /// Minimum relative loss improvement that counts as progress.
    pub min_rel_improvement: f64,
    /// Epochs without progress before stopping.
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            min_rel_improvement: 1e-3,
            patience: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f32,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            epochs: 10,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DivaError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(DivaError::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DivaError::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    /// Mean training loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// SGD with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if self.momentum == 0.0 {
                p.add_scaled(g, -self.lr);
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((vi, gi), pi) in v.iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

/// Runs `cfg.epochs` passes over `n` samples in seeded shuffled mini-batches.
///
/// `step` receives the sample indices of one mini-batch and returns its mean
/// loss. Early stopping, when configured, watches the epoch-mean loss.
pub(crate) fn run_epochs<F>(n: usize, cfg: &TrainConfig, mut step: F) -> Result<TrainReport>
where
    F: FnMut(usize, &[usize]) -> Result<f64>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(DivaError::EmptyDataset("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let loss = step(epoch, chunk)?;
            if !loss.is_finite() {
                return Err(DivaError::Numerical(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            total += loss * chunk.len() as f64;
        }
        let mean = total / n as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.5}");
        report.epoch_losses.push(mean);
        if let Some(es) = &cfg.early_stop {
            if mean < best * (1.0 - es.min_rel_improvement) {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= es.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(report)
}

/// Sum of a row-separable loss over `x` and the summed parameter gradients.
///
/// `row_loss(offset, logits)` gets the logits of rows `offset..offset+m` and
/// returns the summed loss over those rows with its logit gradient.
pub(crate) fn summed_param_grads<N, L>(net: &N, x: &Tensor, row_loss: L) -> Result<(f64, Params)>
where
    N: Classifier + ?Sized,
    L: Fn(usize, &Tensor) -> Result<(f64, Tensor)> + Sync,
{
    let n = x.batch_size();
    let starts: Vec<usize> = (0..n).step_by(GRAD_CHUNK).collect();
    let parts: Vec<Result<(f64, Params)>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + GRAD_CHUNK).min(n);
            let xs = x.slice_batch(s, e);
            let (logits, tape) = net.forward(&xs, true)?;
            let (loss, dlogits) = row_loss(s, &logits)?;
            let g = net.backward(tape.as_ref().expect("recorded"), &dlogits, true)?;
            Ok((loss, g.params))
        })
        .collect();
    let mut total = 0.0;
    let mut acc: Option<Params> = None;
    for part in parts {
        let (loss, grads) = part?;
        total += loss;
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => {
                for (name, g) in grads {
                    a.get_mut(&name).expect("same parameter set").add_scaled(&g, 1.0);
                }
            }
        }
    }
    Ok((total, acc.unwrap_or_default()))
}

/// Mean cross-entropy gradient of a labelled batch.
pub(crate) fn mean_ce_grads<N: Classifier + ?Sized>(
    net: &N,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<(f64, Params)> {
    let (sum, mut grads) = summed_param_grads(net, inputs, |off, logits| {
        cross_entropy_sum(logits, &labels[off..off + logits.batch_size()])
    })?;
    let n = labels.len() as f64;
    for g in grads.values_mut() {
        g.scale((1.0 / n) as f32);
    }
    Ok((sum / n, grads))
}

/// Trains a copy of `model` with mini-batch cross-entropy SGD.
pub fn sgd_train(model: &Model, data: &Batch, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    crate::nn::loss::check_labels(&data.labels, crate::nn::Classifier::num_classes(model))?;
    let mut model = model.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let report = run_epochs(data.len(), cfg, |_, idx| {
        let b = data.gather(idx);
        let (loss, grads) = mean_ce_grads(&model, &b.inputs, &b.labels)?;
        opt.step(model.params_mut(), &grads);
        Ok(loss)
    })?;
    Ok((model, report))
}

/// Fraction of samples whose top-1 prediction equals the label.
pub fn accuracy<N: Classifier + ?Sized>(net: &N, data: &Batch) -> Result<f64> {
    let preds = predict_batched(net, &data.inputs)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Top-1 predictions computed in parallel chunks.
pub fn predict_batched<N: Classifier + ?Sized>(net: &N, inputs: &Tensor) -> Result<Vec<usize>> {
    let n = inputs.batch_size();
    let starts: Vec<usize> = (0..n).step_by(64).collect();
    let parts: Vec<Result<Vec<usize>>> = starts
        .par_iter()
        .map(|&s| net.predict(&inputs.slice_batch(s, (s + 64).min(n))))
        .collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Logits computed in parallel chunks.
pub fn logits_batched<N: Classifier + ?Sized>(net: &N, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.batch_size();
    let starts: Vec<usize> = (0..n).step_by(64).collect();
    let parts: Vec<Result<Tensor>> = starts
        .par_iter()
        .map(|&s| net.logits(&inputs.slice_batch(s, (s + 64).min(n))))
        .collect();
    let parts: Result<Vec<Tensor>> = parts.into_iter().collect();
    Tensor::stack(&parts?)
}
