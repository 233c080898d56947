use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("missing graph input `{0}`")]
    MissingInput(String),

    #[error("unknown graph input `{0}`")]
    UnknownInput(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: String, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("unknown split `{0}`")]
    UnknownSplit(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("label {0} is outside the evaluated class set")]
    LabelOutOfRange(u32),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
