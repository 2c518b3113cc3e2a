use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not symmetric ({context}): asymmetry {asymmetry:e}")]
    NotSymmetric { context: &'static str, asymmetry: f64 },

    #[error("matrix is not positive definite ({context}): smallest eigenvalue {min_eigenvalue:e}")]
    NotPositiveDefinite {
        context: &'static str,
        min_eigenvalue: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("calibration set too small for (theta={theta}, beta={beta}) with k={k}")]
    CalibrationTooSmall { theta: f64, beta: f64, k: usize },

    #[error(
        "insufficient calibration data: {have} scores give an infinite quantile at theta={theta}; need at least {needed}"
    )]
    InsufficientCalibration { needed: usize, have: usize, theta: f64 },

    #[error("point set does not span R^{dim} (eigenvalue ratio {ratio:e})")]
    RankDeficient { dim: usize, ratio: f64 },

    #[error("{what} did not converge within {iterations} iterations (residual {residual:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("tightened constraints are empty: {0}")]
    TighteningInfeasible(String),

    #[error("optimization problem is infeasible: {0}")]
    Infeasible(String),

    #[error("conic solver failed: {0}")]
    Solver(String),

    #[error("no multiplier pair on the grid is feasible ({} points tried)", .statuses.len())]
    SynthesisInfeasible { statuses: Vec<GridPointStatus> },
}

/// Outcome of a single multiplier pair during the invariant-region grid search.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridPointStatus {
    pub lambda0: f64,
    pub lambda1: f64,
    pub outcome: GridOutcome,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GridOutcome {
    Feasible { trace: f64 },
    Infeasible,
    SolverFailure { message: String },
}

impl Error {
    /// True for outcomes that are an expected analytic result (infeasible
    /// problem, not enough data) rather than a bug or numerical breakdown.
    pub fn is_analytic_outcome(&self) -> bool {
        matches!(
            self,
            Error::CalibrationTooSmall { .. }
                | Error::InsufficientCalibration { .. }
                | Error::TighteningInfeasible(_)
                | Error::Infeasible(_)
                | Error::SynthesisInfeasible { .. }
        )
    }
}
