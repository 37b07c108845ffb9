use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the stabilizer kernels and their file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed array file: {0}")]
    Format(String),

    #[error("expected rank 4, got rank {0}")]
    Rank(usize),

    #[error("non-finite value {value} at index {index:?}")]
    NonFinite { index: Vec<usize>, value: f32 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid parameter: {0}")]
    Invalid(String),

    #[error("session mismatch: {0}")]
    Session(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by bad input values or geometry rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
