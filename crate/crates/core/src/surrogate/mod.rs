//! Surrogate models for settings where the attacker lacks the original model.
//!
//! Semi-blackbox: the attacker holds the adapted model and distills a
//! full-precision surrogate from it, initialised from its dequantized weights.
//! Blackbox: the attacker can only query the deployed model; it distills a
//! surrogate from fresh initialisation and then quantization-aware trains a
//! surrogate adapted model on the teacher's labels. Both only ever see
//! probability vectors through [`Teacher`].

pub mod distill;
pub mod remote;

pub use distill::{
    build_blackbox, build_semi_blackbox, distill, distill_from_probs, distillation_loss,
    BlackboxConfig, DistillConfig, DistillReport, TransferSet,
};
pub use remote::{serve_queries, spawn_teacher, ChildTeacher, StreamTeacher};

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;
use crate::nn::loss::softmax_probs;
use crate::nn::model::Classifier;
use crate::nn::train::logits_batched;
use crate::tensor::Tensor;

/// Query access to a deployed classifier.
pub trait Teacher: Send + Sync {
    /// Probability rows `[n, classes]` for a batch of inputs.
    fn query(&self, inputs: &Tensor) -> Result<Tensor>;
}

impl<T: Teacher + ?Sized> Teacher for Box<T> {
    fn query(&self, inputs: &Tensor) -> Result<Tensor> {
        (**self).query(inputs)
    }
}

/// Exposes a local classifier's softmax outputs and nothing else.
pub struct QueryOracle<'a> {
    net: &'a dyn Classifier,
}

impl<'a> QueryOracle<'a> {
    pub fn new(net: &'a dyn Classifier) -> Self {
        QueryOracle { net }
    }
}

impl Teacher for QueryOracle<'_> {
    fn query(&self, inputs: &Tensor) -> Result<Tensor> {
        Ok(softmax_probs(&logits_batched(self.net, inputs)?))
    }
}

/// Counts the query calls and samples that pass through a teacher.
pub struct CountingTeacher<T> {
    inner: T,
    calls: AtomicUsize,
    samples: AtomicUsize,
}

impl<T: Teacher> CountingTeacher<T> {
    pub fn new(inner: T) -> Self {
        CountingTeacher {
            inner,
            calls: AtomicUsize::new(0),
            samples: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn samples(&self) -> usize {
        self.samples.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: Teacher> Teacher for CountingTeacher<T> {
    fn query(&self, inputs: &Tensor) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.samples.fetch_add(inputs.batch_size(), Ordering::SeqCst);
        self.inner.query(inputs)
    }
}
