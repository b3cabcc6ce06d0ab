use crate::adapt::adapted::AdaptedModel;
use crate::error::{DivaError, Result};
use crate::nn::model::{Batch, Classifier, Model};
use crate::nn::train::predict_batched;

/// A full-precision model and its adapted twin with identical architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    original: Model,
    adapted: AdaptedModel,
}

impl ModelPair {
    pub fn new(original: Model, adapted: AdaptedModel) -> Result<Self> {
        if !original.same_architecture(adapted.base()) {
            return Err(DivaError::ArchitectureMismatch(
                "original and adapted models differ in layers, input shape or classes".into(),
            ));
        }
        Ok(ModelPair { original, adapted })
    }

    pub fn original(&self) -> &Model {
        &self.original
    }

    pub fn adapted(&self) -> &AdaptedModel {
        &self.adapted
    }

    pub fn num_classes(&self) -> usize {
        self.original.num_classes()
    }

    pub fn into_parts(self) -> (Model, AdaptedModel) {
        (self.original, self.adapted)
    }
}

/// Counts of the two deviation kinds between a model pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Deviations {
    pub original_only_correct: usize,
    pub adapted_only_correct: usize,
    pub total: usize,
}

impl Deviations {
    pub fn instability(&self) -> f64 {
        (self.original_only_correct + self.adapted_only_correct) as f64 / self.total as f64
    }
}

pub fn deviations<A, B>(original: &A, adapted: &B, data: &Batch) -> Result<Deviations>
where
    A: Classifier + ?Sized,
    B: Classifier + ?Sized,
{
    if data.is_empty() {
        return Err(DivaError::EmptyDataset("instability needs samples".into()));
    }
    let po = predict_batched(original, &data.inputs)?;
    let pa = predict_batched(adapted, &data.inputs)?;
    let mut d = Deviations {
        total: data.len(),
        ..Default::default()
    };
    for ((o, a), y) in po.iter().zip(&pa).zip(&data.labels) {
        match (o == y, a == y) {
            (true, false) => d.original_only_correct += 1,
            (false, true) => d.adapted_only_correct += 1,
            _ => {}
        }
    }
    Ok(d)
}

/// Fraction of samples where exactly one of the two models is correct.
pub fn instability(pair: &ModelPair, data: &Batch) -> Result<f64> {
    Ok(deviations(pair.original(), pair.adapted(), data)?.instability())
}
