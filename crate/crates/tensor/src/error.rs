use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("tensors must have rank 1 to 4, got rank {0}")]
    Rank(usize),

    #[error("{op}: shape mismatch on {axis}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        detail: String,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}` at tape node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub(crate) fn mismatch(op: &'static str, axis: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        axis,
        detail: detail.into(),
    }
}
