use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: {msg}")]
    Input { op: &'static str, msg: String },
    #[error("{op}: index {index} out of range 0..{len}")]
    Range { op: &'static str, index: usize, len: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("schema error at {pointer:?}: {msg}")]
    Schema { pointer: String, msg: String },
    #[error("format: {0}")]
    Format(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("generation: {0}")]
    Generation(String),
    #[error("numerical failure in {module} at step {step}: {msg}")]
    Numerical { module: &'static str, step: usize, msg: String },
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Nn(#[from] tcr_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn input(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Input { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
