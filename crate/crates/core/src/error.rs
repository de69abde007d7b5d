use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty loss support: every target position is masked")]
    EmptyLossSupport,

    #[error("target id {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("empty visual sequence")]
    EmptyVisualSequence,

    #[error("degenerate polygon: {0} vertices, need at least 3")]
    DegeneratePolygon(usize),

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(f64),

    #[error("mask has no foreground cells")]
    EmptyMask,

    #[error("empty query span")]
    EmptySpan,

    #[error("zero-norm vector in cosine similarity")]
    ZeroVector,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter path `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint error for `{name}`: {msg}")]
    Checkpoint { name: String, msg: String },

    #[error("{path}:{line}: field `{field}`: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        field: String,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("frozen parameter group `{0}` changed during training")]
    FreezeViolation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
