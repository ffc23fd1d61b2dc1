use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,

    #[error("standard deviation must be nonnegative, got {0}")]
    NegativeStd(f64),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix not symmetric (max asymmetry {asymmetry:e} exceeds tolerance {tol:e})")]
    NotSymmetric { asymmetry: f64, tol: f64 },

    #[error("matrix is indefinite beyond tolerance (min eigenvalue {min_eig:e})")]
    Indefinite { min_eig: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} has {size} elements, above the configured cap of {cap}{hint}")]
    TooLarge {
        what: &'static str,
        size: usize,
        cap: usize,
        hint: &'static str,
    },

    #[error("jacobian requires single sample (batch = {0})")]
    BatchedJacobian(usize),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("auto-scaling failed: {0}")]
    Autoscale(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
