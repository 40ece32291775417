//! Runner-level errors with the process exit-code mapping.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Bad configuration (file, flag, or field); exits with code 2.
    #[error("config error: {0}")]
    Config(String),
    /// A runtime invariant was violated (weights off the simplex, non-finite
    /// metric cells); exits with code 3.
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("{0}")]
    Core(f2dc_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

impl From<f2dc_core::Error> for Error {
    fn from(e: f2dc_core::Error) -> Self {
        match e {
            f2dc_core::Error::Config { .. } => Error::Config(e.to_string()),
            other => Error::Core(other),
        }
    }
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Invariant(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
