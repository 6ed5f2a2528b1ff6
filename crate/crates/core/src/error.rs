use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure carries a category; the CLI prints it as a message prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corruption error: {0}")]
    Corruption(String),
    #[error("labeling error: {0}")]
    Labeling(String),
    #[error("divergence error: {0}")]
    Divergence(String),
    #[error("io error: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("io error: {0}")]
    Decode(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short category name, also used as the message prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Labeling(_) => "labeling",
            Error::Divergence(_) => "divergence",
            Error::Io { .. } | Error::Decode(_) => "io",
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
