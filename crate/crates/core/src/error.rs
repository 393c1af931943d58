use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument failed a shape, range or configuration check.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A caller broke an ordering or pairing contract (e.g. blocks out of order).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// Two internal computations that must agree did not.
    #[error("internal consistency: {0}")]
    InternalConsistency(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("block {block}: {source}")]
    AtBlock {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::ContractViolation(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Attaches the generating block index to an error.
    pub fn at_block(self, block: usize) -> Self {
        match self {
            e @ Error::AtBlock { .. } => e,
            other => Error::AtBlock {
                block,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
