use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an already consumed graph")]
    GraphConsumed,
    #[error("{context}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumericError>;
