use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: every entry of row {row} is masked")]
    DegenerateMask { op: &'static str, row: usize },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("training diverged: non-finite gradient in parameter `{param}`")]
    Divergence { param: String },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("index {index} out of range for extent {extent} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
