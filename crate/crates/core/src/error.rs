use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violated a documented precondition or type invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value in layer {layer}, head {head} ({stage})")]
    Numeric {
        layer: usize,
        head: usize,
        stage: &'static str,
    },

    #[error("model returned an invalid next-token distribution (sum {sum})")]
    InvalidDistribution { sum: f64 },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("replay miss: no recorded entry for context sha256 {context_hash}")]
    ReplayMiss { context_hash: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("model produced no valid continuation")]
    EmptyCandidates,

    #[error("training diverged ({0}); try a smaller learning rate")]
    Divergence(String),

    #[error("unbalanced braces in boxed answer at offset {offset}")]
    UnbalancedBraces { offset: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad inputs rather than by a failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::Json(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Record { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Numeric { .. } | Error::InvalidDistribution { .. } => "numeric",
            Error::Format { .. } => "format",
            Error::Parse { .. } => "parse",
            Error::ReplayMiss { .. } => "replay_miss",
            Error::Unsupported(_) => "unsupported",
            Error::EmptyCandidates => "empty_candidates",
            Error::Divergence(_) => "divergence",
            Error::UnbalancedBraces { .. } => "unbalanced_braces",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Record { source, .. } => source.kind(),
        }
    }
}
