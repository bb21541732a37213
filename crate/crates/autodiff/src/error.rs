use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadLength { shape: Shape, len: usize },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("gradient requested of a non-scalar output with shape {shape:?}")]
    NonScalarOutput { shape: Shape },

    #[error("variable belongs to a different computation record")]
    ForeignVar,

    #[error("optimizer state is not initialized for these parameters")]
    UninitializedOptimizer,

    #[error("finite-difference oracle is invalid: {0}")]
    OracleInvalid(String),
}

pub type Result<T, E = AutogradError> = std::result::Result<T, E>;
