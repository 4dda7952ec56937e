use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("failed to load {record}: {reason}")]
    Load { record: String, reason: String },

    #[error("proposal contains no frames: {0}")]
    SkipProposal(String),

    #[error("training data error: {0}")]
    TrainingData(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn load(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load { record: record.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
