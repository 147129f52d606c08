use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: payload holds {actual} bytes, header declares {expected}")]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("patch selection shortfall: {qualifying} qualifying centers, {requested} requested")]
    SelectionShortfall { qualifying: usize, requested: usize },

    #[error("could not satisfy lesion fraction {target} after {attempts} attempts")]
    Unsatisfiable { target: f64, attempts: usize },

    #[error("ground truth mask is empty")]
    EmptyGroundTruth,

    #[error("score undefined: prediction and ground truth are both empty")]
    DoublyEmpty,

    #[error("ground truth must contain both lesion and background voxels")]
    MissingClass,

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
