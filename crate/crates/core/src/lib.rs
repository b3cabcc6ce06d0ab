//! Differential evasion attacks against edge-adapted neural networks.
//!
//! Given a full-precision model and its quantized or pruned twin, the DIVA
//! attack searches the L-infinity ball around an input for a point where the
//! adapted model mispredicts while the original model stays correct. The crate
//! bundles everything needed to reproduce that at desk scale:
//!
//! - [`nn`]: a small reverse-mode network engine (dense, 3x3 conv, ReLU, 2x2
//!   max-pool, flatten) with SGD training.
//! - [`adapt`]: affine fake-quantization, quantization-aware training with
//!   straight-through estimators, magnitude pruning and instability.
//! - [`attack`]: FGSM, R+FGSM, PGD and momentum PGD.
//! - [`diva`]: the differential loss, whitebox and targeted DIVA, c-sweeps.
//! - [`surrogate`]: distillation-based surrogates for the semi-blackbox and
//!   blackbox settings, including a line-delimited query protocol.
//! - [`defend`]: minimax PGD robust training, minimax DIVA QAT and its
//!   distillation-augmented variant.
//! - [`harness`]: datasets, metrics, DSSIM, PCA, reports and experiments.
//! - [`checkpoint`]: the `DIVA1` checkpoint format.

pub mod adapt;
pub mod attack;
pub mod checkpoint;
pub mod defend;
pub mod diva;
pub mod error;
pub mod harness;
pub mod nn;
pub mod surrogate;
pub mod tensor;

pub use error::{DivaError, Result};
pub use tensor::Tensor;
