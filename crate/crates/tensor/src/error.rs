use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("dimension error in mlp `{mlp}` layer {layer}: expects {expected} inputs, got {got}")]
    Layer {
        mlp: String,
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> TensorError {
    TensorError::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
