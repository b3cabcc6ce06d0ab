//! Magnitude pruning with mask-preserving fine-tuning.

use crate::adapt::adapted::{apply_masks, mask_grads, AdaptedModel, Masks};
use crate::adapt::qat::{qat_train_masked, QatConfig};
use crate::error::{DivaError, Result};
use crate::nn::model::{Batch, Model};
use crate::nn::train::{mean_ce_grads, run_epochs, Sgd, TrainConfig};
use crate::tensor::Tensor;

/// Binary mask zeroing the `round(sparsity * len)` smallest-magnitude entries.
/// Ties are broken by position.
pub fn magnitude_mask(t: &Tensor, sparsity: f64) -> Result<Tensor> {
    check_sparsity(sparsity)?;
    let k = (sparsity * t.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&a, &b| {
        t.data()[a]
            .abs()
            .total_cmp(&t.data()[b].abs())
            .then(a.cmp(&b))
    });
    let mut mask = Tensor::full(t.shape(), 1.0);
    for &i in &order[..k] {
        mask.data_mut()[i] = 0.0;
    }
    Ok(mask)
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(DivaError::InvalidArgument(format!(
            "sparsity must be in [0, 1), got {sparsity}"
        )));
    }
    Ok(())
}

/// Masks for every weight tensor (biases are never pruned).
pub fn magnitude_masks(model: &Model, sparsity: f64) -> Result<Masks> {
    check_sparsity(sparsity)?;
    model
        .weight_names()
        .into_iter()
        .map(|name| {
            let m = magnitude_mask(&model.params()[&name], sparsity)?;
            Ok((name, m))
        })
        .collect()
}

/// Prunes each weight tensor by magnitude, then fine-tunes with the mask held.
pub fn prune_magnitude(
    model: &Model,
    sparsity: f64,
    data: &Batch,
    finetune: &TrainConfig,
) -> Result<AdaptedModel> {
    let masks = magnitude_masks(model, sparsity)?;
    let mut pruned = model.clone();
    apply_masks(&mut pruned, &masks);
    if finetune.epochs > 0 {
        let mut opt = Sgd::new(finetune.lr, finetune.momentum);
        run_epochs(data.len(), finetune, |_, idx| {
            let b = data.gather(idx);
            let (loss, mut grads) = mean_ce_grads(&pruned, &b.inputs, &b.labels)?;
            mask_grads(&mut grads, &masks);
            opt.step(pruned.params_mut(), &grads);
            apply_masks(&mut pruned, &masks);
            Ok(loss)
        })?;
    }
    AdaptedModel::pruned(pruned, masks)
}

/// Pruning followed by quantization-aware training that preserves sparsity.
pub fn prune_then_quantize(
    model: &Model,
    sparsity: f64,
    data: &Batch,
    finetune: &TrainConfig,
    qat: &QatConfig,
) -> Result<AdaptedModel> {
    let pruned = prune_magnitude(model, sparsity, data, finetune)?;
    let masks = pruned.masks().clone();
    qat_train_masked(pruned.base(), data, qat, Some(masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_sparsity_drops_the_two_smallest() {
        let t = Tensor::row(&[1.0, -2.0, 3.0, -4.0]);
        let m = magnitude_mask(&t, 0.5).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let t = Tensor::row(&[1.0, -2.0, 3.0]);
        assert!(magnitude_mask(&t, 0.0).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn full_sparsity_is_rejected() {
        let t = Tensor::row(&[1.0]);
        assert!(magnitude_mask(&t, 1.0).is_err());
        assert!(magnitude_mask(&t, -0.1).is_err());
    }

    #[test]
    fn achieved_sparsity_is_within_one_entry() {
        let t = Tensor::from_fn(&[7, 3], |i| ((i * 37) % 11) as f32 - 5.0);
        for s in [0.1, 0.33, 0.5, 0.9] {
            let m = magnitude_mask(&t, s).unwrap();
            let zeros = m.data().iter().filter(|&&v| v == 0.0).count() as f64;
            assert!((zeros / t.len() as f64 - s).abs() <= 1.0 / t.len() as f64);
        }
    }
}
