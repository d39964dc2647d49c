use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid record {record_id}: {message}")]
    Validation { record_id: String, message: String },

    #[error("invalid channel dictionary: {0}")]
    Dictionary(String),

    #[error("matrix format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix rank {achievable} is below the requested {requested} components")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input for stage {stage}: expected {path}")]
    MissingInput { stage: String, path: PathBuf },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Error::Stage { .. } | Error::MissingInput { .. } => self,
            other => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// Short machine-readable category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::Dictionary(_) => "dictionary",
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::InvalidInput(_) => "invalid_input",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Config(_) => "config",
            Error::MissingInput { .. } => "missing_input",
            Error::Stage { source, .. } => source.category(),
            Error::Json(_) => "json",
        }
    }
}
