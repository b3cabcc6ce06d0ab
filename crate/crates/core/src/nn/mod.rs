//! Minimal differentiable feed-forward network engine.

pub mod layer;
pub mod loss;
pub mod model;
pub(crate) mod ops;
pub mod train;

pub use layer::{lenet, mlp, Layer};
pub use loss::{cross_entropy, softmax_probs, softmax_with_temperature, CrossEntropy, LogitLoss};
pub use model::{predict_topk, Batch, Classifier, Gradients, Model, Params, Tape};
pub use train::{accuracy, sgd_train, EarlyStop, Sgd, TrainConfig, TrainReport};
