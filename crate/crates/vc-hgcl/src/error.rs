//! Crate-wide error type and result alias.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong, from shape mismatches up to I/O.
#[derive(Debug)]
pub enum Error {
    /// Two tensors had incompatible shapes for an operation.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A numeric guard tripped (non-finite values, diverging loss).
    Numeric { op: &'static str, detail: String },
    /// An input was degenerate for the requested computation
    /// (e.g. a zero-norm vector fed to cosine similarity).
    DegenerateInput { op: &'static str, detail: String },
    /// A caller broke an API contract (bad index, malformed box,
    /// inconsistent configuration).
    Contract { detail: String },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl Error {
    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract {
            detail: detail.into(),
        }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DegenerateInput {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the CLI: 2 for contract violations,
    /// 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Numeric { op, detail } => write!(f, "{op}: numeric failure: {detail}"),
            Error::DegenerateInput { op, detail } => {
                write!(f, "{op}: degenerate input: {detail}")
            }
            Error::Contract { detail } => write!(f, "contract violation: {detail}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
