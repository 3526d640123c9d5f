use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unsupported magic {0:#010x} ({0})")]
    UnsupportedMagic(u32),

    #[error("truncated IDX payload: header requires {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("IDX dimension mismatch: {0}")]
    IdxShape(String),

    #[error("label {label} out of range (num classes {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("model parameters became non-finite in round {round}")]
    Diverged { round: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the filesystem or output writers, as opposed to
    /// bad input values.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Csv(_) | Error::Json(_))
    }
}
