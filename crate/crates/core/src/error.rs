use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, bad
    /// hyperparameter, out-of-range argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input file (WAV container, bundle, attack list, ...).
    #[error("parse error: {0}")]
    Parse(String),

    /// The file is well-formed but uses a codec/layout we do not support.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// Bad run configuration (empty corpus, inconsistent lengths, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A forward/backward pass produced a non-finite value.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for usage/config problems,
    /// 3 for runtime failures. (0/1 are reserved for verify outcomes.)
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Parse(_) | Error::UnsupportedFormat(_) | Error::Config(_) => 2,
            Error::NonFinite(_) | Error::Io { .. } => 3,
        }
    }
}
