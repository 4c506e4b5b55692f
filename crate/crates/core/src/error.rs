use thiserror::Error;

pub type Result<T, E = MoeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("component {component} is empty (total responsibility {mass:e})")]
    EmptyComponent { component: usize, mass: f64 },

    #[error("observation {index} has zero likelihood under every component")]
    ZeroLikelihood { index: usize },

    /// The penalized log-likelihood became NaN or infinite. The trace up to
    /// the failing iteration is attached.
    #[error("penalized log-likelihood became non-finite at EM iteration {iteration}")]
    NonFinite { iteration: usize, trace: Vec<f64> },

    #[error("parameters contain non-finite values")]
    NonFiniteParams,

    #[error("every grid cell failed or was degenerate: {0}")]
    AllFitsFailed(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl MoeError {
    /// True for errors caused by the input data or files rather than by the
    /// numerics of a fit.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            MoeError::Dimension(_)
                | MoeError::InvalidData(_)
                | MoeError::Csv(_)
                | MoeError::Json(_)
                | MoeError::Io(_)
        )
    }
}
