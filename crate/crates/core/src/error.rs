use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("action index {index} out of range for {n_actions} actions")]
    ActionOutOfRange { index: usize, n_actions: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("forward cache is stale (cached for parameter version {cached}, net is at {current})")]
    StaleCache { cached: u64, current: u64 },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("training the model of task {task_id} diverged at epoch {epoch}: loss = {loss}")]
    TaskTrainingDiverged { task_id: usize, epoch: usize, loss: f64 },

    #[error("cannot decode observation: {0}")]
    Undecodable(String),

    #[error("encoder is not injective: minimum inter-state distance {0}")]
    NotInjective(f64),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("buffer is empty")]
    EmptyBuffer,

    #[error("experience buffer is full (capacity {0})")]
    BufferFull(usize),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
