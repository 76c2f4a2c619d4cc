use thiserror::Error;

pub type Result<T, E = DeomError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DeomError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Hermitian: {0}")]
    NotHermitian(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("{what} did not converge: {detail}")]
    NoConvergence { what: String, detail: String },

    #[error("divergence at t = {time:e}: entry norm {norm:e} exceeds bound {bound:e}")]
    Divergence { time: f64, norm: f64, bound: f64 },

    #[error("index space of {entries} entries exceeds the budget of {budget}")]
    Budget { entries: u128, budget: usize },

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DeomError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DeomError::Invalid(msg.into())
    }
}
