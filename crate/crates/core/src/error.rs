use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("kv cache error: {0}")]
    Cache(String),
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error("unknown token id {id} (vocab size {vocab_size})")]
    UnknownToken { id: u32, vocab_size: usize },
    #[error("gradient oracle failure: {0}")]
    Oracle(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
