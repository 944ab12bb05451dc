use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid input to {op}: {msg}")]
    Input { op: &'static str, msg: String },
    #[error("variable does not belong to this tape (stale or foreign tape)")]
    StaleTape,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NnError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        NnError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn input(op: &'static str, msg: impl Into<String>) -> Self {
        NnError::Input {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, NnError>;
