use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapt::quant::{check_bits, dequantize, quantize_tensor, QuantRange, QuantizedTensor, Quantizer};
use crate::error::{DivaError, Result};
use crate::nn::layer::Layer;
use crate::nn::model::{penultimate_of, Classifier, Gradients, Model, Tape};
use crate::tensor::Tensor;

/// Which edge adaptations were applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    Quantized,
    Pruned,
    PrunedQuantized,
}

impl AdaptMode {
    pub fn is_quantized(self) -> bool {
        matches!(self, AdaptMode::Quantized | AdaptMode::PrunedQuantized)
    }

    pub fn is_pruned(self) -> bool {
        matches!(self, AdaptMode::Pruned | AdaptMode::PrunedQuantized)
    }
}

pub type Masks = BTreeMap<String, Tensor>;

/// An edge-adapted model: quantized and/or pruned.
///
/// `base` always holds the effective floating-point parameters used in the
/// forward pass. For quantized modes they are exactly the dequantized integer
/// codes, and every layer output is fake-quantized with frozen calibration
/// ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    base: Model,
    mode: AdaptMode,
    bits: u8,
    weights: BTreeMap<String, QuantizedTensor>,
    activations: Vec<Option<QuantRange>>,
    act_quantizers: Vec<Option<Quantizer>>,
    masks: Masks,
}

impl AdaptedModel {
    /// Quantizes every parameter tensor of `shadow` and freezes the given
    /// per-layer activation ranges.
    pub fn quantize(
        shadow: &Model,
        activations: Vec<Option<QuantRange>>,
        bits: u8,
        masks: Option<Masks>,
    ) -> Result<Self> {
        check_bits(bits)?;
        let mut weights = BTreeMap::new();
        for (name, t) in shadow.params() {
            weights.insert(name.clone(), quantize_tensor(t, bits)?);
        }
        let mode = if masks.is_some() {
            AdaptMode::PrunedQuantized
        } else {
            AdaptMode::Quantized
        };
        Self::from_codes(shadow, weights, activations, bits, masks.unwrap_or_default(), mode)
    }

    /// Rebuilds a quantized model from stored integer codes.
    pub fn from_codes(
        arch: &Model,
        weights: BTreeMap<String, QuantizedTensor>,
        activations: Vec<Option<QuantRange>>,
        bits: u8,
        masks: Masks,
        mode: AdaptMode,
    ) -> Result<Self> {
        if !mode.is_quantized() {
            return Err(DivaError::InvalidArgument(
                "integer codes given for a non-quantized mode".into(),
            ));
        }
        check_bits(bits)?;
        if activations.len() != arch.layers().len() {
            return Err(DivaError::InvalidArgument(format!(
                "missing calibration: {} activation ranges for {} layers",
                activations.len(),
                arch.layers().len()
            )));
        }
        for (i, (layer, range)) in arch.layers().iter().zip(&activations).enumerate() {
            if range.is_none() && !matches!(layer, Layer::Flatten) {
                return Err(DivaError::InvalidArgument(format!(
                    "missing calibration for {}",
                    layer.describe(i)
                )));
            }
        }
        let mut params = BTreeMap::new();
        for (name, q) in &weights {
            if q.params.bits != bits {
                return Err(DivaError::InvalidArgument(format!(
                    "tensor '{name}' quantized with {} bits, model uses {bits}",
                    q.params.bits
                )));
            }
            params.insert(name.clone(), dequantize(q)?);
        }
        let base = Model::from_params(arch.input_shape(), arch.layers().to_vec(), params)?;
        check_masks(&base, &masks)?;
        let act_quantizers = activations
            .iter()
            .map(|r| r.map(|r| r.quantizer(bits)))
            .collect();
        Ok(AdaptedModel {
            base,
            mode,
            bits,
            weights,
            activations,
            act_quantizers,
            masks,
        })
    }

    /// A pruned (full-precision) model; masked entries must already be zero.
    pub fn pruned(model: Model, masks: Masks) -> Result<Self> {
        check_masks(&model, &masks)?;
        Ok(AdaptedModel {
            base: model,
            mode: AdaptMode::Pruned,
            bits: 32,
            weights: BTreeMap::new(),
            activations: Vec::new(),
            act_quantizers: Vec::new(),
            masks,
        })
    }

    pub fn mode(&self) -> AdaptMode {
        self.mode
    }

    /// Bit width of quantized modes (32 for pruned-only models).
    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Effective full-precision view of the parameters (dequantized/masked).
    pub fn base(&self) -> &Model {
        &self.base
    }

    pub fn layers(&self) -> &[Layer] {
        self.base.layers()
    }

    pub fn quantized_weights(&self) -> &BTreeMap<String, QuantizedTensor> {
        &self.weights
    }

    pub fn activation_ranges(&self) -> &[Option<QuantRange>] {
        &self.activations
    }

    pub(crate) fn activation_quantizers(&self) -> &[Option<Quantizer>] {
        &self.act_quantizers
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    /// Masks if this model is pruned.
    pub fn masks_opt(&self) -> Option<&Masks> {
        self.mode.is_pruned().then_some(&self.masks)
    }

    /// Forward pass through fake-quantized weights and activations.
    pub fn fake_quant_forward(&self, inputs: &Tensor) -> Result<Tensor> {
        if !self.mode.is_quantized() {
            return Err(DivaError::InvalidArgument(
                "fake-quant forward requires a quantized model".into(),
            ));
        }
        Ok(self.base.run(inputs, Some(&self.act_quantizers), false)?.0)
    }

    /// Hash of the integer codes and quantization parameters (or the
    /// effective parameters for pruned-only models).
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        if !self.mode.is_quantized() {
            return self.base.digest();
        }
        let mut h = Sha256::new();
        for (name, q) in &self.weights {
            h.update(name.as_bytes());
            h.update(&q.codes);
            h.update(q.params.scale.to_le_bytes());
            h.update(q.params.zero_point.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn penultimate_activations(&self, input: &Tensor) -> Result<Tensor> {
        penultimate_of(self, self.base.layers(), input)
    }
}

fn check_masks(model: &Model, masks: &Masks) -> Result<()> {
    for (name, m) in masks {
        let p = model
            .param(name)
            .ok_or_else(|| DivaError::InvalidArgument(format!("mask for unknown tensor '{name}'")))?;
        p.ensure_same_shape(m, name)?;
        for (&mv, &pv) in m.data().iter().zip(p.data()) {
            if mv != 0.0 && mv != 1.0 {
                return Err(DivaError::InvalidArgument(format!(
                    "mask '{name}' is not binary"
                )));
            }
            if mv == 0.0 && pv != 0.0 {
                return Err(DivaError::InvalidArgument(format!(
                    "pruned entry of '{name}' is non-zero"
                )));
            }
        }
    }
    Ok(())
}

impl Classifier for AdaptedModel {
    fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    fn input_shape(&self) -> &[usize] {
        self.base.input_shape()
    }

    fn forward(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<Tape>)> {
        let act = self.mode.is_quantized().then_some(self.act_quantizers.as_slice());
        self.base.run(x, act, record)
    }

    fn backward(&self, tape: &Tape, dlogits: &Tensor, want_params: bool) -> Result<Gradients> {
        self.base.backprop(tape, dlogits, want_params)
    }
}

/// Borrowed fake-quantized network used while training quantized weights.
pub(crate) struct FakeQuantNet<'a> {
    pub model: &'a Model,
    pub act: &'a [Option<Quantizer>],
}

impl Classifier for FakeQuantNet<'_> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn input_shape(&self) -> &[usize] {
        self.model.input_shape()
    }

    fn forward(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<Tape>)> {
        self.model.run(x, Some(self.act), record)
    }

    fn backward(&self, tape: &Tape, dlogits: &Tensor, want_params: bool) -> Result<Gradients> {
        self.model.backprop(tape, dlogits, want_params)
    }
}

/// Copy of `model` whose parameters are quantize-dequantized per tensor.
pub(crate) fn fake_quantized_params(model: &Model, bits: u8) -> Result<Model> {
    let mut out = model.clone();
    for t in out.params_mut().values_mut() {
        *t = crate::adapt::quant::fake_quantize(t, bits)?;
    }
    Ok(out)
}

pub(crate) fn apply_masks(model: &mut Model, masks: &Masks) {
    for (name, m) in masks {
        if let Some(p) = model.params_mut().get_mut(name) {
            for (v, &keep) in p.data_mut().iter_mut().zip(m.data()) {
                if keep == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

pub(crate) fn mask_grads(grads: &mut crate::nn::Params, masks: &Masks) {
    for (name, m) in masks {
        if let Some(g) = grads.get_mut(name) {
            for (v, &keep) in g.data_mut().iter_mut().zip(m.data()) {
                if keep == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}
