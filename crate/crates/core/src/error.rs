use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("filter design failed: {0}")]
    Design(String),
    #[error("signal too short: {0}")]
    Length(String),
    #[error("montage error: missing electrodes {missing:?}")]
    Montage { missing: Vec<String> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("version mismatch: {0}")]
    Version(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
