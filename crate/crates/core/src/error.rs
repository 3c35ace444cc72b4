use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },

    #[error("{0}: zero-norm vector has no direction")]
    ZeroNorm(&'static str),

    #[error("tape: {0}")]
    Tape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("label {label} is not part of the current task")]
    UnknownLabel { label: usize },

    #[error("class {class} already registered")]
    LabelOverlap { class: usize },

    #[error("class {class} has {have} instances, stream needs {need}")]
    Insufficient { class: usize, need: usize, have: usize },

    #[error("non-finite loss at batch {batch}: {breakdown}")]
    NonFiniteLoss { batch: usize, breakdown: String },

    #[error("model has not been trained on any task")]
    Untrained,

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
