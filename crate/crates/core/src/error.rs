use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    /// The target policy visits a state-action pair that the behavior policy never visits.
    #[error("coverage violation at (state {state}, action {action}): target mass {target_mass:e} with zero behavior mass")]
    Coverage {
        state: usize,
        action: usize,
        target_mass: f64,
    },

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("rank-deficient normal equations ({dim}x{dim}, null-space dimension {null_dim})")]
    RankDeficient { dim: usize, null_dim: usize },

    #[error("reconstructed kernel row (state {state}, action {action}) has non-positive mass {mass:e}")]
    DegenerateRow {
        state: usize,
        action: usize,
        mass: f64,
    },

    #[error("behavior probability is zero for realized action {action} in state {state}")]
    ZeroBehaviorProbability { state: usize, action: usize },

    #[error("estimate {0} outside the sanity range [-0.5, 1.5]")]
    EstimateOutOfRange(f64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
