//! Error taxonomy shared across the workspace.
//!
//! Kinds map onto the CLI exit codes: configuration and data problems are
//! recoverable user errors (exit 2), numerical failures abort a run
//! (exit 3), and everything else is a plain bug surfaced loudly.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TriqError>;

#[derive(Debug, Error)]
pub enum TriqError {
    /// An op was applied to tensors whose shapes do not combine.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An op was applied with invalid attributes or operand ranks.
    #[error("{op}: {msg}")]
    InvalidOp { op: &'static str, msg: String },

    /// A bad argument outside the tape (config values, bit-widths, ...).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Malformed or truncated on-disk data; names the file and byte offset.
    #[error("data error in {path} at offset {offset}: {msg}")]
    Data {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Non-finite values where finite ones are required (diverged loss, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Problems parsing or validating a run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TriqError {
    /// Process exit code the CLI reports for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            TriqError::Numerical(_) => 3,
            TriqError::InvalidArg(_) | TriqError::InvalidOp { .. } | TriqError::ShapeMismatch { .. } => 2,
            TriqError::Data { .. } | TriqError::Config(_) | TriqError::Io(_) | TriqError::Json(_) => 2,
        }
    }
}
