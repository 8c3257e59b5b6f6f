use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum KoopmanError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("index {index} out of range for {len} items")]
    Index { index: usize, len: usize },
    #[error("state outside the model domain: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KoopmanError>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(KoopmanError::Input(msg.into()))
}
