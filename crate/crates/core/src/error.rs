use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {value} outside the valid range {lo}..={hi}")]
    Range {
        op: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("{op}: degenerate input ({reason})")]
    Degenerate { op: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("solver failure in {op}: {reason}")]
    Solver { op: &'static str, reason: String },

    #[error("numerical fault in {op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("format error in {context} at byte {offset}: {reason}")]
    Format {
        context: String,
        offset: u64,
        reason: String,
    },

    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension { op, expected, got }
    }

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Solver { .. } | Error::NonFinite { .. })
    }
}
