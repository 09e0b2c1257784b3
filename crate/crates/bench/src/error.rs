use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("target unreachable: {0}")]
    TargetUnreachable(String),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("workload specs differ in {0}")]
    SpecMismatch(String),
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid report: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] llmscale_sim::SimError),
}

impl BenchError {
    /// Process exit code: 2 for target errors, 3 for spec and input errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            BenchError::TargetUnreachable(_) => 2,
            _ => 3,
        }
    }
}
