use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("leaf `{0}` has no binding")]
    UnboundLeaf(String),
    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("objective is not a scalar (shape {0:?})")]
    NonScalarObjective(Vec<usize>),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model kind mismatch: expected {expected}, found {found}")]
    ModelKind { expected: String, found: String },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },
    #[error("empty set: {0}")]
    EmptySet(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
