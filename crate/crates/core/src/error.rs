use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("boundary mask selects no positions")]
    EmptyMask,

    #[error("non-finite boundary logit at position {0}")]
    NonFiniteLogit(usize),

    #[error("batch centering needs at least two sequences, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite gradient in parameter `{0}`; step aborted")]
    NonFiniteGradient(String),

    #[error("corpus is empty after filtering")]
    EmptyCorpus,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed corpus: {0}")]
    Corpus(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
