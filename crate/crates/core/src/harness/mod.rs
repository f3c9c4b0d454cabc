//! Experiment driver: configuration, the training loop, ablations, probes
//! and metrics output.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod metrics;
pub mod train;

pub use config::{ExperimentConfig, Variant};
pub use train::{train, Learners, TrainOutcome, Trainer};
