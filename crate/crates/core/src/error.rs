use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Shapes that cannot be combined by the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A structurally valid call that violates an operation's contract
    /// (zero-size dim where one is required, bad axis, bad group count).
    #[error("invalid operation: {0}")]
    Contract(String),

    /// NaN or infinity surfaced where the caller required finite values.
    #[error("non-finite values in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Contract(msg.into()))
}
