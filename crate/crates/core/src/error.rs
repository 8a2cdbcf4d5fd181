use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A batch regression whose stacked regressor lacks the column rank the
    /// named excitation condition requires.
    #[error("ill-posed regression: {condition} needs rank {required}, data gives {achieved}")]
    RankCondition {
        condition: &'static str,
        required: usize,
        achieved: usize,
    },

    #[error("Lyapunov equation has no solution: spectral radius {rho:.6} >= 1")]
    NoLyapunovSolution { rho: f64 },

    #[error("gain is not stabilizing: spectral radius {rho:.6} >= 1")]
    NotStabilizing { rho: f64 },

    #[error("step-size rule stalled at iteration {k}: proposed alpha = {alpha:e}")]
    StalledIteration { k: usize, alpha: f64 },

    #[error("beta search exhausted the sequence (last tried {last:e}) without a positive definite evaluation")]
    BetaSearchExhausted { last: f64 },

    #[error("{what} did not converge in {iters} iterations (last change {residual:e})")]
    NonConvergence {
        what: &'static str,
        iters: usize,
        residual: f64,
    },

    #[error("state diverged at t = {t}: norm {norm:e} exceeds guard")]
    Divergence { t: usize, norm: f64 },

    #[error("regulator equations unsolvable: rank condition fails at eigenvalue {lambda} of E")]
    RegulatorUnsolvable { lambda: String },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage} failed for agent {agent}: {source}")]
    Stage {
        stage: &'static str,
        agent: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str, agent: usize) -> Error {
        Error::Stage {
            stage,
            agent,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::Json(_) | Error::Io(_) | Error::Assumption(_) | Error::Dimension(_) => 2,
            Error::RankCondition { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
