//! Experiment harness around the `f2dc-core` engine: configuration files,
//! the round driver (with optional client-level parallelism), CSV/JSON
//! result export, and binary checkpoint / dataset containers.

pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod round;

pub use config::{ExperimentConfig, Mode, Precision};
pub use error::{Error, Result};
pub use experiment::{run_experiment, Experiment, RunArtifacts};
pub use round::RoundReport;
