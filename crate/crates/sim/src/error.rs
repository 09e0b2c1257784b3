use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("operation needs a manual clock")]
    Mode,
    #[error("submission rejected: {0}")]
    SubmitRejected(String),
    #[error("script lacks submission parameters: {0}")]
    InvalidScript(String),
    #[error("unknown sim job {0}")]
    UnknownJob(String),
    #[error("illegal job transition {from:?} -> {to:?} for {job}")]
    IllegalTransition {
        job: String,
        from: crate::scheduler::SimJobState,
        to: crate::scheduler::SimJobState,
    },
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

impl From<SimError> for llmscale_core::submit::SchedulerError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::SubmitRejected(reason) => Self::Rejected(reason),
            other => Self::Rejected(other.to_string()),
        }
    }
}
