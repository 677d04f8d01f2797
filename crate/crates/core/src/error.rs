use thiserror::Error;

use crate::ipsolve::IpState;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid representation: {0}")]
    InvalidRep(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("composition destroys injectivity: mapped operator has rank {rank} < {cols} columns")]
    NotInjective { rank: usize, cols: usize },

    #[error("penalty value infinite at y")]
    InfiniteValue,

    #[error("nonsmooth penalty; apply moreau() first")]
    Nonsmooth,

    #[error("singular Newton system: {0}")]
    Singular(String),

    #[error("interior point did not converge in {iterations} iterations (kkt residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: Box<IpState>,
    },

    #[error("primal constraints have no strictly feasible point")]
    Infeasible,

    #[error("column {index}: {source}")]
    Column {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("code update failed on {failed} of {total} columns at iteration {iteration}")]
    CodeUpdateFailed {
        failed: usize,
        total: usize,
        iteration: usize,
    },

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("bad data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
