use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("contract error: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        TensorError::Dimension(msg.into())
    }
}
