use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(
        "non-finite loss at step {step} (mode {mode}, inner step {inner}): \
         delta norm {delta_norm:.3e}, P norm {p_norm:.3e}, Q norm {q_norm:.3e}"
    )]
    NonFinite {
        step: usize,
        inner: usize,
        mode: String,
        delta_norm: f64,
        p_norm: f64,
        q_norm: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Exit code used by the command-line front end: 2 for configuration
    /// problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
