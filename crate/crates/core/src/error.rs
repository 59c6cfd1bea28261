use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("storage region does not contain Λ_{required} (needed for {context})")]
    BoxTooSmall { required: u64, context: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("degenerate estimator: {0}")]
    Degenerate(String),
    #[error("estimation failure: {0}")]
    EstimationFailure(String),
    #[error("snapshot format error: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
