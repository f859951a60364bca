//! Experiment harness: run configuration, results files, the ablation grid,
//! hyperparameter sweeps, the inference-cost benchmark and the `camml` CLI.

pub mod ablate;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod results;
pub mod sweep;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
