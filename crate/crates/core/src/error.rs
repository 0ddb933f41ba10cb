use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("key-configuration budget exhausted after {attempts} attempts ({accepted} of {wanted} accepted)")]
    BudgetExhausted {
        attempts: usize,
        accepted: usize,
        wanted: usize,
    },
    #[error("start or goal configuration is in collision")]
    InvalidEndpoints,
    #[error("planner failed: {0}")]
    PlanningFailed(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}
