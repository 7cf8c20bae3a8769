//! Experiment orchestration for the multi-pitch estimators: Monte-Carlo
//! sweeps, real-audio frame-wise estimation, configuration, persistence,
//! and plot-data emission.
//!
//! A completed run re-executes bit-identically from its config plus master
//! seed: per-trial seeds derive deterministically from the master seed and
//! trial index (independent of the sweep point, so grid sweeps see matched
//! signals), trials run on a worker pool with no shared mutable state, and
//! results merge through index-ordered buffers.

pub mod audio;
pub mod config;
pub mod plots;
pub mod runner;
pub mod selftest;

pub use config::{ExperimentConfig, Method, Scenario};
pub use runner::{run_simulate, run_sweep, ResultRow, ResultTable};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration or arguments (exit code 2).
    #[error("config error: {0}")]
    Config(String),
    /// Unreadable or malformed data (exit code 3).
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<otpitch_core::CoreError> for CliError {
    fn from(e: otpitch_core::CoreError) -> Self {
        use otpitch_core::CoreError::*;
        match e {
            InvalidArgument(_) | DimensionMismatch { .. } => CliError::Config(e.to_string()),
            Io(_) | UnsupportedFormat(_) | MalformedData(_) | Aliasing { .. } | ZeroSignal => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
