use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"{}\", found \"{}\"", .expected.escape_ascii(), .found.escape_ascii())]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("instance too large for exhaustive search: {0} states")]
    TooLarge(f64),
    #[error("insufficient labels: {0}")]
    InsufficientLabels(String),
}

/// Coarse error classes, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Format,
    Validation,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::BadMagic { .. } | Error::Truncated { .. } | Error::DimensionOverflow(_) => {
                ErrorClass::Format
            }
            Error::Numerical(_) => ErrorClass::Numerical,
            Error::Shape(_)
            | Error::InvalidConfig(_)
            | Error::InvalidInput(_)
            | Error::TooLarge(_)
            | Error::InsufficientLabels(_) => ErrorClass::Validation,
        }
    }
}
