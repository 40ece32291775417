//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors raised by tensor construction, tape operations, and the
/// federation/data layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// An input is mathematically unusable (zero-norm vector, N < 2, ...).
    DegenerateInput { op: &'static str, detail: String },
    /// A configuration value is out of its valid range.
    Config { field: &'static str, detail: String },
    /// An API contract was violated (non-scalar loss, empty layer set, ...).
    Contract { op: &'static str, detail: String },
    /// External data contained NaN or infinite values.
    NonFinite { context: &'static str },
    /// A client has no local samples; the caller should skip it this round.
    EmptyClientDataset { client: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::DegenerateInput { op, detail } => write!(f, "degenerate input to {op}: {detail}"),
            Error::Config { field, detail } => write!(f, "invalid config `{field}`: {detail}"),
            Error::Contract { op, detail } => write!(f, "contract violation in {op}: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::EmptyClientDataset { client } => write!(f, "client {client} has no samples"),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl fmt::Display) -> Error {
    Error::ShapeMismatch { op, detail: alloc::format!("{detail}") }
}

pub(crate) fn degenerate(op: &'static str, detail: impl fmt::Display) -> Error {
    Error::DegenerateInput { op, detail: alloc::format!("{detail}") }
}

pub(crate) fn config_err(field: &'static str, detail: impl fmt::Display) -> Error {
    Error::Config { field, detail: alloc::format!("{detail}") }
}

pub(crate) fn contract(op: &'static str, detail: impl fmt::Display) -> Error {
    Error::Contract { op, detail: alloc::format!("{detail}") }
}
