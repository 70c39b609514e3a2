use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum ApdmError {
    /// Invalid configuration value; the message names the offending field or bound.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index error: {what} = {index} outside [{lo}, {hi}]")]
    Index {
        what: &'static str,
        index: usize,
        lo: usize,
        hi: usize,
    },
    /// Caller violated a precondition (empty batch, dimension mismatch, ...).
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed checkpoint; `field` names the header field that failed to validate.
    #[error("checkpoint format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ApdmError>;

impl ApdmError {
    pub fn config(msg: impl Into<String>) -> Self {
        ApdmError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        ApdmError::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        ApdmError::Numeric(msg.into())
    }
}
