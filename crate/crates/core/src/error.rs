//! Crate-wide error type.
//!
//! Variants are grouped so callers (notably the CLI) can map every failure to
//! one of four stable classes: config, data, numeric, io.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Invalid configuration: bad patch geometry, hyperparameters, unknown keys.
    Config(String),
    /// Bad input data: unparseable cells, missing files, incompatible series.
    Data(String),
    /// Tensor shape mismatch in a numerical operation.
    Shape(String),
    /// Non-finite values, autodiff misuse, or an optimizer contract violation.
    Numeric(String),
    /// Checkpoint or artifact format violation (wrong magic, truncation, ...).
    Format(String),
    /// A metric is undefined for the given inputs (e.g. single-class labels).
    Metric(String),
    Io(std::io::Error),
}

impl Error {
    /// Stable machine-greppable class name, also used to pick CLI exit codes.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::Shape(_) | Error::Format(_) | Error::Metric(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
        }
    }

    /// The detail text without the class prefix [`Display`] adds.
    pub fn message(&self) -> String {
        match self {
            Error::Config(msg)
            | Error::Data(msg)
            | Error::Shape(msg)
            | Error::Numeric(msg)
            | Error::Format(msg)
            | Error::Metric(msg) => msg.clone(),
            Error::Io(err) => err.to_string(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Metric(msg) => write!(f, "metric error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
