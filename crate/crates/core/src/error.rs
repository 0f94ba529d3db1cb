use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum CalmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    /// Coordinate descent did not settle; the last iterate is kept for inspection.
    #[error("coordinate descent did not converge after {passes} passes (max change {max_change:.3e})")]
    NonConvergence {
        passes: usize,
        max_change: f64,
        coefficients: Vec<f64>,
    },

    #[error("positivity violation: {0}")]
    Positivity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Training produced a non-finite loss. `trace` holds the per-epoch losses seen so far.
    #[error("training diverged in {stage} at epoch {epoch}")]
    Divergence {
        stage: String,
        epoch: usize,
        trace: Vec<f64>,
    },

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CalmError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CalmError::InvalidArgument(msg.into()))
}
