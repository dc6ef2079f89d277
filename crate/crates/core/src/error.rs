use std::path::PathBuf;

use crate::corpus::UserId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown user {0}")]
    UnknownUser(UserId),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("user {0} has no community with a non-empty movement profile")]
    NoInfluencer(UserId),

    #[error("similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("training set contains a single label")]
    DegenerateTraining,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("AUC undefined: scores contain a single class")]
    UndefinedAuc,

    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("missing artifact {}: run the `{stage}` stage first", path.display())]
    Dependency { path: PathBuf, stage: &'static str },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// Process exit status for a failed run: 2 for configuration, 3 for a
    /// missing stage artifact, 4 for everything data-related.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Dependency { .. } => 3,
            _ => 4,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
