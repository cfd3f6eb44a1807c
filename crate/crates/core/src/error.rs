use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("training diverged: non-finite value in {0}")]
    Diverged(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("embedding extraction failed for video {video}: {reason}")]
    Extraction { video: String, reason: String },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
