//! Activation calibration and quantization-aware training.

use serde::{Deserialize, Serialize};

use crate::adapt::adapted::{apply_masks, fake_quantized_params, mask_grads, AdaptedModel, FakeQuantNet, Masks};
use crate::adapt::quant::{check_bits, QuantRange, Quantizer};
use crate::error::{DivaError, Result};
use crate::nn::layer::Layer;
use crate::nn::loss::check_labels;
use crate::nn::model::{Batch, Classifier, Model};
use crate::nn::train::{mean_ce_grads, run_epochs, Sgd, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QatConfig {
    pub bits: u8,
    /// Decay of the exponential moving average over per-batch min/max.
    pub ema_decay: f32,
    pub train: TrainConfig,
}

impl Default for QatConfig {
    fn default() -> Self {
        QatConfig {
            bits: 8,
            ema_decay: 0.99,
            train: TrainConfig {
                lr: 0.03,
                epochs: 2,
                batch_size: 32,
                momentum: 0.9,
                seed: 1,
                early_stop: None,
            },
        }
    }
}

/// Per-layer output ranges from one in-order pass over `data`.
///
/// Each batch's min/max updates an exponential moving average (the first
/// batch initialises it). Flatten layers get no range since they only
/// reshape.
pub fn calibrate(
    model: &Model,
    data: &Batch,
    batch_size: usize,
    decay: f32,
) -> Result<Vec<Option<QuantRange>>> {
    if data.is_empty() {
        return Err(DivaError::EmptyDataset("calibration data".into()));
    }
    let layers = model.layers();
    let mut ema: Vec<Option<(f32, f32)>> = vec![None; layers.len()];
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let x = data.inputs.slice_batch(start, end);
        let (logits, tape) = model.forward(&x, true)?;
        let tape = tape.expect("recorded");
        for i in 0..layers.len() {
            let out = if i + 1 < layers.len() {
                tape.layer_input(i + 1)
            } else {
                &logits
            };
            let (lo, hi) = out
                .data()
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            ema[i] = Some(match ema[i] {
                None => (lo, hi),
                Some((mlo, mhi)) => (
                    decay * mlo + (1.0 - decay) * lo,
                    decay * mhi + (1.0 - decay) * hi,
                ),
            });
        }
        start = end;
    }
    layers
        .iter()
        .zip(ema)
        .map(|(layer, r)| match (layer, r) {
            (Layer::Flatten, _) | (_, None) => Ok(None),
            (_, Some((lo, hi))) => QuantRange::new(lo, hi).map(Some),
        })
        .collect()
}

/// Quantization-aware training starting from `model`'s weights.
///
/// Activation ranges are calibrated on one epoch of `data` and then frozen.
/// Every step fake-quantizes the shadow weights and all layer outputs; the
/// backward pass treats each quantize/dequantize node as identity inside its
/// range and as zero outside it.
pub fn qat_train(model: &Model, data: &Batch, cfg: &QatConfig) -> Result<AdaptedModel> {
    qat_train_masked(model, data, cfg, None)
}

/// [`qat_train`] that keeps masked weights exactly zero.
pub fn qat_train_masked(
    model: &Model,
    data: &Batch,
    cfg: &QatConfig,
    masks: Option<Masks>,
) -> Result<AdaptedModel> {
    check_bits(cfg.bits)?;
    check_labels(&data.labels, model.num_classes())?;
    let ranges = calibrate(model, data, cfg.train.batch_size, cfg.ema_decay)?;
    let quantizers: Vec<Option<Quantizer>> = ranges
        .iter()
        .map(|r| r.map(|r| r.quantizer(cfg.bits)))
        .collect();
    let mut shadow = model.clone();
    if let Some(m) = &masks {
        apply_masks(&mut shadow, m);
    }
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum);
    run_epochs(data.len(), &cfg.train, |_, idx| {
        let b = data.gather(idx);
        let fq = fake_quantized_params(&shadow, cfg.bits)?;
        let net = FakeQuantNet {
            model: &fq,
            act: &quantizers,
        };
        let (loss, mut grads) = mean_ce_grads(&net, &b.inputs, &b.labels)?;
        if let Some(m) = &masks {
            mask_grads(&mut grads, m);
        }
        opt.step(shadow.params_mut(), &grads);
        if let Some(m) = &masks {
            apply_masks(&mut shadow, m);
        }
        Ok(loss)
    })
    .map_err(|e| match e {
        DivaError::Numerical(msg) => DivaError::Numerical(format!("QAT diverged: {msg}")),
        other => other,
    })?;
    AdaptedModel::quantize(&shadow, ranges, cfg.bits, masks)
}
