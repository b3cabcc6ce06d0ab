//! Datasets, evaluation metrics, image statistics, reports and experiments.

pub mod data;
pub mod dssim;
pub mod experiment;
pub mod metrics;
pub mod pca;
pub mod report;

pub use data::{filter_correct, synth_dataset, Dataset, Split};
pub use dssim::dssim;
pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
pub use metrics::{evaluate, EvalConfig, MetricsReport, SampleRecord};
pub use pca::{pca2, pca2_fit};
