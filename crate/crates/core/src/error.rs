use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("attention: empty context (key length 0)")]
    EmptyContext,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid plan: {}", .0.join("; "))]
    Plan(Vec<String>),

    #[error("block boundary incompatible between {left} and {right}: {detail}")]
    Boundary {
        left: String,
        right: String,
        detail: String,
    },

    #[error("alignment error: student features {student:?} vs teacher features {teacher:?}")]
    Alignment {
        student: Vec<usize>,
        teacher: Vec<usize>,
    },

    #[error("numeric divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt checkpoint at offset {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("corrupt checkpoint at offset {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
