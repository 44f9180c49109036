//! Configuration, data, training, evaluation and ablation plumbing.

pub mod ablate;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod synthetic;
pub mod train;
