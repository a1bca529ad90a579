use std::path::PathBuf;

use ndarray::Array2;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("singular scale: |gamma[{index}]| = {value:e} is below the floor")]
    SingularScale { index: usize, value: f64 },

    /// The adaptive solver ran out of its evaluation budget. `state` is the
    /// solution at `t_reached`, the furthest point integrated.
    #[error("ODE solver did not converge: {evals} evaluations, reached t = {t_reached}")]
    NonConvergence {
        evals: usize,
        t_reached: f64,
        state: Box<Array2<f64>>,
    },

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Whether this error stems from numerics (as opposed to usage or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::NonFinite(_) | Error::SingularScale { .. }
        )
    }
}
