use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value detected: {0}")]
    Numeric(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("refusing to overwrite existing artifact {0} (use --force)")]
    Exists(PathBuf),

    #[error("vote table error: {0}")]
    Votes(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::UnknownToken(_) | Error::Prompt(_) => 2,
            Error::Checkpoint(_) | Error::StageOrder(_) | Error::Exists(_) => 3,
            Error::Numeric(_) | Error::Degenerate(_) => 4,
            Error::Shape { .. } => 3,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Votes(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
