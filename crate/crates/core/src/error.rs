use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("power iteration did not converge (residual {residual:e} after {iters} iterations)")]
    NonConvergence { residual: f64, iters: usize },

    #[error("history has marginal probability {0:e} under the stationary distribution")]
    DegenerateHistory(f64),

    #[error("no position matches the conditioning history")]
    EmptyMatchSet,

    #[error("parameters were built for sequences of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("loss became non-finite at iteration {iter}")]
    NumericalDivergence { iter: usize },

    #[error("seed sweep needs at least two seeds, got {0}")]
    InsufficientSeeds(usize),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for bad input, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::LengthMismatch { .. }
            | Error::InsufficientSeeds(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
