use thiserror::Error;

use crate::glm::LassoSolution;

pub type Result<T> = std::result::Result<T, PsmError>;

#[derive(Debug, Error)]
pub enum PsmError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The solver could not certify optimality. `best` holds the lowest-objective
    /// iterate it reached.
    #[error("solver failure: {reason}")]
    SolverFailure {
        reason: String,
        best: Option<Box<LassoSolution>>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// The message already includes the inner error, so it is not exposed
    /// as a source (which would print it twice in error chains).
    #[error("{context}: {inner}")]
    Context { context: String, inner: Box<PsmError> },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PsmError {
    pub fn context(self, context: impl Into<String>) -> Self {
        PsmError::Context {
            context: context.into(),
            inner: Box::new(self),
        }
    }

    /// Walks through `Context` wrappers to the underlying error.
    pub fn root(&self) -> &PsmError {
        match self {
            PsmError::Context { inner, .. } => inner.root(),
            other => other,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn with_context<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T, E: Into<PsmError>> ResultExt<T> for std::result::Result<T, E> {
    fn with_context<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.into().context(f()))
    }
}
