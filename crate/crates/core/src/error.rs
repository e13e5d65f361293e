//! Crate-wide error type.

use std::fmt;

#[derive(Debug, Clone)]
pub enum Error {
    /// A shape or geometry constraint was violated.
    Shape(String),
    /// An argument or configuration value is invalid.
    InvalidArg(String),
    /// Malformed image, manifest, or model file.
    Decode(String),
    /// Manifest parse error, with the 1-based line number.
    Manifest { line: usize, msg: String },
    /// Filesystem failure.
    Io(String),
    /// Non-finite value where a finite one is required.
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::Decode(msg) => write!(f, "decode error: {msg}"),
            Error::Manifest { line, msg } => write!(f, "manifest line {line}: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
