//! Minimax defenses.
//!
//! - Minimax PGD: robust training of the full-precision model on PGD examples
//!   from each mini-batch, followed by quantization-aware training.
//! - Minimax DIVA QAT: the original model is frozen; the adapted model's
//!   shadow weights are trained to minimise the differential loss on DIVA
//!   examples generated against the current pair.
//! - Minimax DIVA QAT + distillation: after each minimax step, `n_distill`
//!   fresh DIVA examples are used to pull the adapted model's outputs toward
//!   the original model's probabilities. With `minimax = false` only the
//!   distillation step runs, on clean samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::adapted::{apply_masks, fake_quantized_params, mask_grads, FakeQuantNet};
use crate::adapt::{qat_train, AdaptedModel, ModelPair, QatConfig};
use crate::attack::{pgd, AttackConfig, AttackVariant};
use crate::diva::{perturb, DivaObjective};
use crate::error::{DivaError, Result};
use crate::nn::loss::{check_labels, class_probability, softmax_row};
use crate::nn::model::{Batch, Classifier, Model};
use crate::nn::train::{mean_ce_grads, run_epochs, summed_param_grads, EarlyStop, Sgd, TrainConfig, TrainReport};
use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseVariant {
    MinimaxPgd,
    MinimaxDivaQat,
    MinimaxDivaQatDistill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    pub variant: DefenseVariant,
    /// Inner maximisation; `inner.c` weighs the differential loss.
    pub inner: AttackConfig,
    /// Outer optimisation (learning rate, epochs, batches, early stop).
    pub train: TrainConfig,
    /// Adversarial samples per distillation step.
    pub n_distill: usize,
    /// Whether the minimax step runs; off leaves plain distillation.
    pub minimax: bool,
    /// QAT applied after robust training.
    pub qat: QatConfig,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            variant: DefenseVariant::MinimaxDivaQat,
            inner: AttackConfig::default(),
            train: TrainConfig {
                lr: 0.01,
                epochs: 2,
                batch_size: 32,
                momentum: 0.9,
                seed: 5,
                early_stop: Some(EarlyStop::default()),
            },
            n_distill: 32,
            minimax: true,
            qat: QatConfig::default(),
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        self.train.validate()?;
        if self.variant == DefenseVariant::MinimaxDivaQatDistill && !(20..=50).contains(&self.n_distill) {
            return Err(DivaError::Config(format!(
                "n_distill must lie in [20, 50], got {}",
                self.n_distill
            )));
        }
        if !self.minimax && self.variant != DefenseVariant::MinimaxDivaQatDistill {
            return Err(DivaError::Config(
                "disabling the minimax step only makes sense for the distillation variant".into(),
            ));
        }
        Ok(())
    }

    fn expect(&self, variants: &[DefenseVariant]) -> Result<()> {
        self.validate()?;
        if !variants.contains(&self.variant) {
            return Err(DivaError::Config(format!(
                "defense variant {:?} does not match the requested defense",
                self.variant
            )));
        }
        Ok(())
    }
}

/// Robust training on PGD examples, then QAT on the clean data.
///
/// With `inner.steps = 0` the trajectory equals plain SGD training under
/// `cfg.train` exactly.
pub fn minimax_pgd_train(model: &Model, data: &Batch, cfg: &DefenseConfig) -> Result<(ModelPair, TrainReport)> {
    cfg.expect(&[DefenseVariant::MinimaxPgd])?;
    check_labels(&data.labels, model.num_classes())?;
    let inner = cfg.inner.clone().with_variant(AttackVariant::Pgd);
    let mut robust = model.clone();
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum);
    let report = run_epochs(data.len(), &cfg.train, |_, idx| {
        let b = data.gather(idx);
        let adv: Vec<Result<Tensor>> = (0..b.len())
            .into_par_iter()
            .map(|i| Ok(pgd(&robust, &b.inputs.sample(i), b.labels[i], &inner)?.adversarial))
            .collect();
        let adv = Tensor::stack(&adv.into_iter().collect::<Result<Vec<_>>>()?)?;
        let (loss, grads) = mean_ce_grads(&robust, &adv, &b.labels)?;
        opt.step(robust.params_mut(), &grads);
        Ok(loss)
    })
    .map_err(diverged)?;
    let adapted = qat_train(&robust, data, &cfg.qat)?;
    Ok((ModelPair::new(robust, adapted)?, report))
}

fn diverged(e: DivaError) -> DivaError {
    match e {
        DivaError::Numerical(m) => DivaError::Numerical(format!("defense training diverged: {m}")),
        other => other,
    }
}

/// Minimax DIVA quantization-aware training; the original model is frozen.
pub fn minimax_diva_qat(pair: &ModelPair, data: &Batch, cfg: &DefenseConfig) -> Result<ModelPair> {
    cfg.expect(&[DefenseVariant::MinimaxDivaQat])?;
    shadow_training(pair, data, cfg, false)
}

/// [`minimax_diva_qat`] interleaved with distillation on DIVA examples.
pub fn minimax_diva_qat_distill(pair: &ModelPair, data: &Batch, cfg: &DefenseConfig) -> Result<ModelPair> {
    cfg.expect(&[DefenseVariant::MinimaxDivaQatDistill])?;
    shadow_training(pair, data, cfg, true)
}

/// Dispatches on `cfg.variant`.
pub fn defend(pair: &ModelPair, data: &Batch, cfg: &DefenseConfig) -> Result<ModelPair> {
    match cfg.variant {
        DefenseVariant::MinimaxPgd => Ok(minimax_pgd_train(pair.original(), data, cfg)?.0),
        DefenseVariant::MinimaxDivaQat => minimax_diva_qat(pair, data, cfg),
        DefenseVariant::MinimaxDivaQatDistill => minimax_diva_qat_distill(pair, data, cfg),
    }
}

/// DIVA examples against (`original`, fake-quantized shadow), one per index.
fn diva_examples(
    original: &Model,
    net: &FakeQuantNet<'_>,
    data: &Batch,
    idx: &[usize],
    objective: &DivaObjective,
    inner: &AttackConfig,
) -> Result<Tensor> {
    let adv: Vec<Result<Tensor>> = idx
        .par_iter()
        .map(|&i| {
            let t = perturb(original, net, &data.inputs.sample(i), data.labels[i], objective, inner)?;
            Ok(t.adversarial)
        })
        .collect();
    Tensor::stack(&adv.into_iter().collect::<Result<Vec<_>>>()?)
}

fn mean_grads(mut grads: Params, n: usize) -> Params {
    for g in grads.values_mut() {
        g.scale(1.0 / n as f32);
    }
    grads
}

fn shadow_training(pair: &ModelPair, data: &Batch, cfg: &DefenseConfig, distill: bool) -> Result<ModelPair> {
    let original = pair.original();
    let adapted = pair.adapted();
    if !adapted.mode().is_quantized() {
        return Err(DivaError::InvalidArgument(
            "minimax DIVA QAT needs a quantized adapted model".into(),
        ));
    }
    check_labels(&data.labels, original.num_classes())?;
    if cfg.train.epochs == 0 {
        return Ok(pair.clone());
    }
    let frozen = original.digest();
    let bits = adapted.bits();
    let ranges = adapted.activation_ranges().to_vec();
    let quantizers = adapted.activation_quantizers();
    let masks = adapted.masks_opt().cloned();
    let objective = DivaObjective::untargeted(cfg.inner.c);
    let c = cfg.inner.c as f64;

    // The differential loss can be negative, so relative early stopping on it
    // is meaningless; these variants always run the full epoch budget.
    let train = TrainConfig {
        early_stop: None,
        ..cfg.train.clone()
    };
    let mut shadow = adapted.base().clone();
    let mut opt = Sgd::new(train.lr, train.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_d157);
    let mut pool: Vec<usize> = (0..data.len()).collect();

    let mut step = |shadow: &mut Model, grads: Params| {
        let mut grads = grads;
        if let Some(m) = &masks {
            mask_grads(&mut grads, m);
        }
        opt.step(shadow.params_mut(), &grads);
        if let Some(m) = &masks {
            apply_masks(shadow, m);
        }
    };

    run_epochs(data.len(), &train, |_, idx| {
        let mut loss = 0.0;
        if cfg.minimax {
            let fq = fake_quantized_params(&shadow, bits)?;
            let net = FakeQuantNet {
                model: &fq,
                act: quantizers,
            };
            let adv = diva_examples(original, &net, data, idx, &objective, &cfg.inner)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let po: Vec<f64> = {
                let lo = crate::nn::train::logits_batched(original, &adv)?;
                (0..idx.len()).map(|r| class_probability(&lo.sample(r), labels[r]).0).collect()
            };
            // Only the adapted term depends on the shadow weights.
            let (sum_pa, grads) = summed_param_grads(&net, &adv, |off, logits| {
                let mut g = vec![0.0f32; logits.len()];
                let k = logits.sample_len();
                let mut total = 0.0;
                for r in 0..logits.batch_size() {
                    let (p, gp) = class_probability(&logits.sample(r), labels[off + r]);
                    total += p;
                    for j in 0..k {
                        g[r * k + j] = (-c * gp[j]) as f32;
                    }
                }
                Ok((total, Tensor::new(logits.shape().to_vec(), g)?))
            })?;
            step(&mut shadow, mean_grads(grads, idx.len()));
            loss = (po.iter().sum::<f64>() - c * sum_pa) / idx.len() as f64;
        }
        if distill {
            pool.shuffle(&mut rng);
            let chosen = &pool[..cfg.n_distill.min(pool.len())];
            let fq = fake_quantized_params(&shadow, bits)?;
            let net = FakeQuantNet {
                model: &fq,
                act: quantizers,
            };
            let samples = if cfg.minimax {
                diva_examples(original, &net, data, chosen, &objective, &cfg.inner)?
            } else {
                data.inputs.gather(chosen)
            };
            let targets = crate::nn::train::logits_batched(original, &samples)?;
            let (kl, grads) = summed_param_grads(&net, &samples, |off, logits| {
                let k = logits.sample_len();
                let mut g = vec![0.0f32; logits.len()];
                let mut total = 0.0;
                for r in 0..logits.batch_size() {
                    let p = softmax_row(targets.row_slice(off + r));
                    let q = softmax_row(logits.row_slice(r));
                    for j in 0..k {
                        if p[j] > 0.0 {
                            total += p[j] * (p[j].ln() - q[j].max(f64::MIN_POSITIVE).ln());
                        }
                        g[r * k + j] = (q[j] - p[j]) as f32;
                    }
                }
                Ok((total, Tensor::new(logits.shape().to_vec(), g)?))
            })?;
            step(&mut shadow, mean_grads(grads, chosen.len()));
            if !cfg.minimax {
                loss = kl / chosen.len() as f64;
            }
        }
        Ok(loss)
    })
    .map_err(diverged)?;

    if original.digest() != frozen {
        return Err(DivaError::FrozenParameters(
            "original-model parameters changed during the defense".into(),
        ));
    }
    let defended = AdaptedModel::quantize(&shadow, ranges, bits, masks)?;
    ModelPair::new(original.clone(), defended)
}
