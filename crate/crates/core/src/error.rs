use thiserror::Error;

use crate::robust_eval::InnerDualVars;
use crate::solver::TraceEntry;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: argument {value} outside its domain ({expected})")]
    Domain {
        what: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("column {column} is degenerate (variance {variance:e} < 1e-12)")]
    DegenerateColumn { column: usize, variance: f64 },

    #[error("correlation matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("weights are not a probability vector: {0}")]
    SimplexViolation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("inner dual minimization did not converge after {iterations} iterations (last mu={}, nu={}, gradient norm {grad_norm:e})", last.mu, last.nu)]
    InnerNotConverged {
        iterations: usize,
        last: InnerDualVars,
        grad_norm: f64,
    },

    #[error("dual ascent did not converge after {iterations} iterations")]
    NotConverged {
        iterations: usize,
        trace: Box<Vec<TraceEntry>>,
    },

    #[error("bisection bracket [{lo}, {hi}] does not contain the target {target}")]
    BracketFailure { lo: f64, hi: f64, target: f64 },

    #[error("invalid program: {0}")]
    InvalidProgram(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid experiment configuration: {0}")]
    Config(String),

    #[error("{failed} of {total} replicates failed (allowed fraction {allowed})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        allowed: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(what: &'static str, value: f64, expected: &'static str) -> Self {
        Error::Domain {
            what,
            value,
            expected,
        }
    }

    /// True for the solver non-convergence family (inner or outer).
    pub fn is_non_convergence(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. } | Error::InnerNotConverged { .. }
        )
    }
}
