//! Experiment orchestration for the `fedyolo` binary: config validation,
//! runs with on-disk artifacts, cross-run reports and parameter counts.

pub mod config;
pub mod error;
pub mod experiment;
pub mod params;
pub mod report;

pub use config::{validate, validate_file, ExperimentConfig, SCHEMA_VERSION};
pub use error::{Error, Result};
pub use experiment::{execute, prepare, ResultFile};
