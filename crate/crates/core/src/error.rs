use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library. Variants map onto the error
/// categories reported by the command-line tool.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid mask: query row {row} has no unmasked key")]
    InvalidMask { row: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("refusing to overwrite existing file {0} (set force=true to replace it)")]
    Exists(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short category name, used for CLI exit codes and messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Shape { .. } => "config",
            Error::InvalidMask { .. } | Error::Numeric(_) => "numeric",
            Error::Parse { .. } | Error::Validation(_) => "data",
            Error::State(_) => "state",
            Error::Checkpoint(_) => "checkpoint",
            Error::Exists(_) | Error::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            "numeric" => 4,
            "state" => 5,
            "checkpoint" => 6,
            _ => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
