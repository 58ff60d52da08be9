//! Scene generation, end-to-end localization, evaluation and benchmarking
//! around `priorloc-core`.

use std::path::Path;

use thiserror::Error;

pub mod config;
pub mod dataset;
pub mod eval;
pub mod pipeline;
pub mod scene;
pub mod traj;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), msg: e.to_string() }
    }

    /// Process exit code: 2 for bad configuration, 3 for I/O and data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Data(_) => 3,
        }
    }
}
