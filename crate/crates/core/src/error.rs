//! Error taxonomy shared by every module.
//!
//! The CLI maps these onto process exit codes: configuration errors exit 2,
//! data/persistence/metric errors exit 3, internal invariant violations exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied inconsistent shapes, hyperparameters, or config values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset ingestion or decoding failed.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint or array-container files are malformed, truncated, or from
    /// an unsupported format version.
    #[error("persistence error: {0}")]
    Persistence(String),

    /// A metric has no defined value on the given inputs (e.g. AUC with a
    /// single class present).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// An internal invariant was violated; indicates a bug, not bad input.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn persistence(msg: impl Into<String>) -> Self {
        Error::Persistence(msg.into())
    }
    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
