use std::fmt;

/// Result alias used across the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: element count {from} cannot be viewed as {to}")]
    ElementCount { op: &'static str, from: usize, to: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParameter(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("image format: {0}")]
    Format(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl fmt::Display) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.to_string(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
