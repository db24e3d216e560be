use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate document id `{0}`")]
    DuplicateDocument(String),

    #[error("document `{id}` has year {year}, outside the configured range {min}..={max}")]
    YearOutOfRange {
        id: String,
        year: i32,
        min: i32,
        max: i32,
    },

    #[error("document `{0}` carries no (role, institution) pairs")]
    EmptyDocument(String),

    #[error("corpus is empty{0}")]
    EmptyCorpus(String),

    #[error("time slice for year {0} is empty")]
    EmptySlice(i32),

    #[error("unresolved entity `{0}`")]
    UnresolvedEntity(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("unrecognized rating `{0}`")]
    UnknownRating(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

impl Error {
    /// Process exit status for command-line use: 2 configuration, 3 missing input,
    /// 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::MissingArtifact(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
