use std::path::PathBuf;

use egam_tensor::TensorError;
use thiserror::Error;

use crate::problems::ProblemKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid instance: {0}")]
    Instance(String),

    #[error("step {step}: node {node} is masked")]
    InvalidTransition { step: usize, node: usize },

    #[error("every node is masked at step {step} (environment invariant violated)")]
    AllMasked { step: usize },

    #[error("decoding did not terminate within {limit} steps")]
    Runaway { limit: usize },

    #[error("malformed solution: {0}")]
    Solution(String),

    #[error("{what} supports at most {max} nodes, got {n}")]
    TooLarge { what: &'static str, max: usize, n: usize },

    #[error("{kind} is not supported by {what}")]
    Unsupported { kind: ProblemKind, what: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
