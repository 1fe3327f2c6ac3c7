use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid measurement {index}: {reason}")]
    InvalidMeasurement { index: usize, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:e})")]
    PowerFlowDiverged { iterations: usize, mismatch: f64 },

    #[error("singular Jacobian in {0}")]
    SingularJacobian(&'static str),

    #[error("measurement set is unobservable (Jacobian rank {rank} < {required})")]
    Unobservable { rank: usize, required: usize },

    #[error("Gauss-Newton diverged at iteration {0}")]
    Diverged(usize),

    #[error("eigenvalue iteration did not converge for a {0}x{0} operator")]
    EigenNotConverged(usize),

    #[error("variance recursion did not settle within {0} iterations")]
    VarianceNotConverged(usize),

    #[error("matrix of dimension {0} exceeds the analysis limit of {1}")]
    TooLarge(usize, usize),

    #[error("zero coefficient on the target edge of a factor message")]
    ZeroCoefficient,

    #[error("removing measurement {0} would leave the system unobservable")]
    WouldBreakObservability(usize),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
