use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("matmul: inner dimensions differ ({lhs:?} x {rhs:?})")]
    InnerDim { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {axis} of size {size} is not divisible by {divisor}")]
    Divisibility {
        op: &'static str,
        axis: String,
        size: usize,
        divisor: usize,
    },
    #[error("{op}: spatial size underflow ({detail})")]
    SizeUnderflow { op: &'static str, detail: String },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("backward: loss must have exactly one element, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: loss is not attached to a computation graph")]
    NotTracked,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}
