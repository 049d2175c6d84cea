//! Experiment harness for the deformable-attention locality simulator:
//! config files, sweep orchestration, report emission, trace files, and the
//! cross-module verification suites.

pub mod config;
pub mod experiment;
pub mod report;
pub mod trace;
pub mod verify;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ReportRow};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error(transparent)]
    Sim(#[from] deformsim::Error),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("trace format error: {0}")]
    Trace(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { path: path.into(), message: message.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }
}
