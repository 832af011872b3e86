use thiserror::Error;

/// Errors produced by the fuzzy CSG engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside its admissible domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Dimensions or lengths of two inputs disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A non-finite value appeared while evaluating or differentiating a node.
    #[error("non-finite value at node {node}: {what}")]
    Numerical { node: usize, what: String },

    /// Malformed document. `path` locates the offending element.
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unsupported document version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u64, expected: u64 },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
