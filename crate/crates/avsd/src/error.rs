use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value in input '{0}'")]
    NonFinite(String),

    #[error("unbound graph input '{0}'")]
    UnboundInput(String),

    #[error("loss node {node} is not a scalar (shape {shape:?})")]
    NonScalarLoss { node: String, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("config error at {path}:{line}: {detail}")]
    Config {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("checkpoint format error in {path}: {detail}")]
    CheckpointFormat { path: PathBuf, detail: String },

    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    StageMismatch { expected: String, found: String },

    #[error("missing tensor '{0}' in checkpoint")]
    MissingTensor(String),

    #[error("feature file error in {path}: {detail}")]
    FeatureFile { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
