//! Crate-wide error type. Variants are grouped by the exit code the CLI maps
//! them to: validation (2), I/O and format (3), numerical failure (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid crop box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("duplicate image id `{0}` in index")]
    DuplicateId(String),

    #[error("index is empty")]
    EmptyIndex,

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 validation, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidBox { .. }
            | Error::DimMismatch { .. }
            | Error::DuplicateId(_)
            | Error::EmptyIndex
            | Error::Config(_)
            | Error::Validation(_) => 2,
            Error::Format { .. } | Error::Io(_) | Error::Image(_) | Error::Json(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
