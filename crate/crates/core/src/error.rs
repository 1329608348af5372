use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical degeneracy: {0}")]
    Numerical(String),

    #[error("integration exceeded the step budget of {max_steps} steps at t = {t}")]
    StepBudget { max_steps: usize, t: f64 },

    #[error("integration diverged at t = {t}")]
    Diverged { t: f64 },

    #[error("non-finite training objective at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("no feasible candidate: best safety probability {best_xi} at {best_theta:?}")]
    NoFeasibleCandidate { best_theta: Vec<f64>, best_xi: f64 },

    #[error("measurement failed from initial state {x0:?}: {reason}")]
    MeasurementFailed { x0: Vec<f64>, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::DimensionMismatch { .. } => 2,
            Error::Numerical(_)
            | Error::StepBudget { .. }
            | Error::Diverged { .. }
            | Error::NonFiniteObjective { .. } => 3,
            _ => 1,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
