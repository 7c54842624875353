use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in input to {op}")]
    NonFinite { op: &'static str },

    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("input of length {required} exceeds the maximum length {max_len}")]
    Overflow { required: usize, max_len: usize },

    #[error("non-finite loss at step {step} (queries {queries:?})")]
    NonFiniteLoss { step: usize, queries: Vec<usize> },

    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::Invalid(_) => "invalid",
            Error::Overflow { .. } => "overflow",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::BadLine { .. } => "bad_line",
            Error::MissingParam(_) => "missing_param",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
