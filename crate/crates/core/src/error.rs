use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (size {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("non-finite iterate at solver step {step}")]
    NonFiniteIterate { step: usize },

    #[error("non-finite loss at step {step}{}", .hint.as_ref().map(|h| format!(" (last good checkpoint: {h})")).unwrap_or_default())]
    NonFiniteLoss { step: usize, hint: Option<String> },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
