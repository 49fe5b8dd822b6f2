//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes passed to a tensor or layer operation. Both
    /// shapes are carried so the message can name them.
    #[error("dimension mismatch in {op}: left operand is {left_rows}x{left_cols}, right operand is {right_rows}x{right_cols}")]
    Dimension {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// Invalid configuration value (bad width, probability out of range, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Operation called in a state that cannot serve it (missing cache,
    /// stale mask, phases run out of order, ...).
    #[error("invalid state: {0}")]
    State(String),

    /// Data content violates an invariant (label out of range, empty set, ...).
    #[error("bad data: {0}")]
    Data(String),

    /// A file exists and is readable but its bytes do not match the
    /// expected format.
    #[error("format error in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    /// A file is shorter or longer than its header implies.
    #[error("length error in {}: expected {expected} bytes, found {actual}", path.display())]
    Length {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    /// NaN or infinity showed up where finite values are required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dimension(
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    ) -> Self {
        Error::Dimension {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
