use dsdn_core::TensorError;
use thiserror::Error;

/// Application-level failures. `Config` covers bad files and bad values,
/// `State` covers using things in the wrong order (untrained codec,
/// missing checkpoint entries), `Training` wraps mid-run aborts with
/// enough context to diagnose them.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("config: {0}")]
    Config(String),
    #[error("state: {0}")]
    State(String),
    #[error("training: {0}")]
    Training(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AppError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AppError::Config(msg.into()))
}

pub(crate) fn state_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AppError::State(msg.into()))
}

pub(crate) fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AppError::Format(msg.into()))
}
