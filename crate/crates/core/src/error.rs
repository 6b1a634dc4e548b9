use omla_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("adapter registry: {0}")]
    Registry(String),

    #[error("cannot pair episodes: {0}")]
    Pairing(String),

    #[error("stale feature cache: built for encoder {cached}, current encoder is {current}")]
    StaleCache { cached: String, current: String },

    #[error("non-finite likelihood in mixture mode {mode}")]
    NonFiniteMode { mode: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CoreError {
    /// True for failures caused by non-finite values rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            CoreError::Numeric(_)
                | CoreError::NonFiniteMode { .. }
                | CoreError::Autodiff(AutodiffError::NonFinite { .. })
                | CoreError::Autodiff(AutodiffError::Domain { .. })
        )
    }
}
