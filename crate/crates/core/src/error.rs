use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("feature norm {norm:e} is too small for cosine classification")]
    DegenerateFeature { norm: f64 },
    #[error("no boundary features: every distance estimate hit the step cap")]
    NoBoundaryFeatures,
    #[error("feature {origin} is already misclassified; synthesis expects a correctly classified boundary feature")]
    AlreadyMisclassified { origin: usize },
    #[error("unreachable boundary: feature {origin} did not flip within {max_steps} steps")]
    UnreachableBoundary { origin: usize, max_steps: usize },
    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// True for failures that originate in the filesystem rather than in the data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            _ => false,
        }
    }
}
