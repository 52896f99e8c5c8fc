use thiserror::Error;

use crate::objectives::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("transport error from `{expert}`: {message}")]
    Transport { expert: String, message: String },

    #[error("protocol error from `{expert}`: {message} (raw response: {raw})")]
    Protocol {
        expert: String,
        message: String,
        raw: String,
    },

    #[error("registry error: {0}")]
    Registry(String),

    #[error("assessment failed for {}: {message}", failed.join(", "))]
    PartialAssessment { failed: Vec<String>, message: String },

    #[error("pseudo-label initialization: no candidates for {}", .0.join(", "))]
    MissingCandidates(Vec<String>),

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("load error in {path} at line {line}: {message}")]
    Load {
        path: String,
        line: usize,
        message: String,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("training diverged (iteration {iteration:?}): {breakdown:?}")]
    Divergence {
        iteration: Option<u64>,
        breakdown: Box<LossBreakdown>,
    },

    #[error("image codec error: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Transport failures may succeed on a later attempt; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
