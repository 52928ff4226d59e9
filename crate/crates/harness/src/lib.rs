//! Experiment orchestration for the spectral-dice estimator: configuration
//! files, dataset generation, evaluation sweeps and kernel dumps.

pub mod config;
pub mod run;

use std::path::PathBuf;

pub use config::ExperimentConfig;
pub use run::{cmd_dump_kernel, cmd_evaluate, cmd_generate, cmd_sweep};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] spectral_dice::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration and argument problems, 1 for
    /// everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) | HarnessError::Argument(_) => 2,
            _ => 1,
        }
    }
}
