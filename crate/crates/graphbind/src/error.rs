//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix/vector shapes; names both offending shapes.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A row (or vector) with near-zero norm where a direction is required.
    #[error("degenerate row {row}: norm {norm:.3e} below 1e-12")]
    DegenerateRow { row: usize, norm: f64 },

    /// Scalar argument outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Autodiff tape misuse (double backward, non-scalar loss, ...).
    #[error("tape state error: {0}")]
    Tape(String),

    /// Batch too small for the contrastive loss.
    #[error("insufficient batch: need at least 2 aligned rows, got {got}")]
    InsufficientBatch { got: usize },

    /// Invalid configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    /// Modality-graph construction failure.
    #[error("graph error: {0}")]
    Graph(String),

    /// Training-loop failure (non-finite gradients, no trainable edges, ...).
    #[error("training error: {0}")]
    Train(String),

    /// Evaluation-protocol failure (empty prototype cell, fully absent instance, ...).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Malformed cell in a data table; positions are 1-based.
    #[error("parse error in {path} at row {row}, column {col}: {msg}")]
    Parse {
        path: String,
        row: usize,
        col: usize,
        msg: String,
    },

    /// Tables referencing inconsistent instance ids.
    #[error("dataset consistency error: {0}")]
    Consistency(String),

    /// Problem size outside brute-force oracle limits.
    #[error("size error: {0}")]
    Size(String),

    /// Malformed checkpoint or report file.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI: usage/config problems are 2, runtime failures 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
