//! Crate-wide error type and result alias.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// A caller-supplied parameter is out of range or inconsistent.
    InvalidArgument(String),
    /// Tensor ranks or extents do not line up.
    ShapeMismatch(String),
    /// A file could not be read or written.
    Io(io::Error),
    /// Bytes do not conform to the expected file format.
    Format(String),
    /// An internal invariant was violated (non-finite values, broken
    /// stochasticity, inconsistent state).
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI: 2 argument error, 3 input-format
    /// error, 4 internal invariant failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::ShapeMismatch(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::Internal(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Internal(msg) => write!(f, "internal invariant violated: {msg}"),
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

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}
