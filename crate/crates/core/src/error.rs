use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Caller passed an out-of-domain argument (fraction, K, coordinate, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed input file or row.
    #[error("parse error: {0}")]
    Parse(String),

    /// Dataset-level failure (empty after filtering, bad archive, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Inconsistent dimensions or invalid configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Unknown id in a vocabulary or table.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
