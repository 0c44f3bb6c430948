//! Training harness and experiment drivers for Dale-constrained spiking
//! networks trained with random error backpropagation.

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod output;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
