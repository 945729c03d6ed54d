use std::path::PathBuf;

/// Everything that can go wrong in the toolkit.
///
/// The CLI maps [`Error::Config`] to exit code 1, [`Error::Math`] (and the
/// other numerical variants) to 2 and [`Error::Io`] to 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration at {path}: {message}")]
    Config { path: String, message: String },

    #[error("{0}")]
    Math(String),

    #[error("power iteration did not converge after {iterations} iterations (last change {last_change:.3e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("resource cap exceeded: {0}")]
    Cap(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn math(message: impl Into<String>) -> Self {
        Error::Math(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Json(_) | Error::Domain(_) => 1,
            Error::Io { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
