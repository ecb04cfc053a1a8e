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

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no interactions in {0}")]
    NoInteractions(PathBuf),

    #[error("unknown dataset format tag `{0}` (expected `ml` or `csv`)")]
    UnknownFormat(String),

    #[error("user {user} has {count} interactions, at least {required} are needed for a leave-one-out split")]
    TooFewInteractions {
        user: usize,
        count: usize,
        required: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch:?})")]
    Diverged {
        epoch: usize,
        last_finite_epoch: Option<usize>,
    },

    #[error("{kind} id {id} out of range (size {size})")]
    OutOfRange {
        kind: &'static str,
        id: usize,
        size: usize,
    },

    #[error("store and knowledge graph disagree: {0}")]
    StoreMismatch(String),

    #[error("user {user} lacks rating tiers for a training candidate list: {deficit}")]
    TierDeficit { user: usize, deficit: String },

    #[error("cannot render prompt: {0}")]
    Render(String),

    #[error("cannot parse prompt: {0}")]
    PromptParse(String),

    #[error("bad binary file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("request failed after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Endpoint {
        status: Option<u16>,
        attempts: u32,
        message: String,
    },

    #[error("endpoint failure rate {rate:.3} exceeded ceiling {ceiling:.3} after {failed} failures")]
    FailureCeiling {
        rate: f64,
        ceiling: f64,
        failed: usize,
        partial: Box<crate::eval::MetricReport>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
