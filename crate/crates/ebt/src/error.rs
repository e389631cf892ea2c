use std::path::PathBuf;

/// Crate-wide error type. The CLI maps variants onto exit codes
/// (usage 2, config 3, missing-stage 4, numeric 5).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(String),

    #[error("config: {0}")]
    Config(String),

    #[error("model file: {0}")]
    Model(String),

    #[error("stage `{needed}` has not run (required by `{wanted_by}`)")]
    MissingStage { needed: String, wanted_by: String },

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("fit: {0}")]
    Fit(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Model(_) => 3,
            Error::MissingStage { .. } => 4,
            Error::Numeric(_) | Error::Fit(_) => 5,
            _ => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
