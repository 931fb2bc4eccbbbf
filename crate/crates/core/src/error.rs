use std::fmt;

/// Errors raised anywhere in the pipeline.
///
/// Every variant maps to a short machine-parsable category (see
/// [`Error::category`]) which the command line prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Format(_) => "format",
            Error::Integrity(_) => "integrity",
            Error::Parse(_) => "parse",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
        }
    }

    /// The message without its category prefix.
    pub fn detail(&self) -> String {
        match self {
            Error::Shape(m)
            | Error::Config(m)
            | Error::Usage(m)
            | Error::Format(m)
            | Error::Integrity(m)
            | Error::Parse(m)
            | Error::Numeric(m) => m.clone(),
            Error::Io(e) => e.to_string(),
        }
    }

    pub(crate) fn shape(msg: impl fmt::Display) -> Self {
        Error::Shape(msg.to_string())
    }

    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub(crate) fn usage(msg: impl fmt::Display) -> Self {
        Error::Usage(msg.to_string())
    }

    pub(crate) fn format(msg: impl fmt::Display) -> Self {
        Error::Format(msg.to_string())
    }

    pub(crate) fn integrity(msg: impl fmt::Display) -> Self {
        Error::Integrity(msg.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
