use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint error at `{key}`: {reason}")]
    Checkpoint { key: String, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in `{component}` at iteration {iteration}")]
    NonFinite { component: String, iteration: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn checkpoint(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
