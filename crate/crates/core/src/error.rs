use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("factor {factor} has entropy {entropy:.6e} nats, at or below the floor {floor:.1e}")]
    EntropyFloor {
        factor: usize,
        entropy: f64,
        floor: f64,
    },

    #[error("numerical failure at iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite objective at optimizer step {step}")]
    NonFinite { step: usize },

    #[error("partition enumeration needs {0} assignments (limit 1e7); use matching mode")]
    TooLarge(u128),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("malformed record on line {line}: {message}")]
    Record { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// True for failures that originate in the numerics (as opposed to bad
    /// input or I/O).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite(_)
            | Error::Degenerate(_)
            | Error::NonFinite { .. }
            | Error::EntropyFloor { .. } => true,
            Error::Iteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
