use thiserror::Error;

use crate::tree::TreeViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid tree: {0}")]
    InvalidTree(#[from] TreeViolation),

    #[error("observations missing at time step {step}")]
    MissingObservation { step: usize },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("message underflow on edge {edge} (entry {value:e} < 1e-300); retry with the log-domain solver")]
    Underflow { edge: usize, value: f64 },

    #[error("outer residual stagnated for {window} consecutive iterations at iteration {iteration}")]
    Stagnation { iteration: usize, window: usize },

    #[error("EM iteration {iteration}: {source}")]
    EmStep {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }

    /// Unwraps nested EM-step wrappers down to the originating error.
    pub fn root(&self) -> &Error {
        match self {
            Error::EmStep { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors raised by an iterative solver rather than by bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self.root(),
            Error::NotConverged { .. } | Error::Underflow { .. } | Error::Stagnation { .. }
        )
    }
}
