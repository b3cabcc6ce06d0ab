//! Edge adaptation: fake-quantization, QAT, magnitude pruning, and model pairs.

pub mod adapted;
pub mod pair;
pub mod prune;
pub mod qat;
pub mod quant;

pub use adapted::{AdaptMode, AdaptedModel, Masks};
pub use pair::{deviations, instability, Deviations, ModelPair};
pub use prune::{magnitude_mask, magnitude_masks, prune_magnitude, prune_then_quantize};
pub use qat::{calibrate, qat_train, qat_train_masked, QatConfig};
pub use quant::{dequantize, quantize_tensor, QuantParams, QuantRange, QuantizedTensor, Quantizer};
