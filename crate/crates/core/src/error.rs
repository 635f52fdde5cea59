use std::path::PathBuf;

/// Errors produced anywhere in the ensemble pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt input: {0}")]
    CorruptInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid probability map: {0}")]
    InvalidProbability(String),

    #[error("incompatible ensemble member: {0}")]
    IncompatibleMember(String),

    #[error("incompatible volumes: {0}")]
    IncompatibleVolumes(String),

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("corrupt vote table: {0}")]
    CorruptVotes(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
