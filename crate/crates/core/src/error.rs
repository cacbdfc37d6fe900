use thiserror::Error;

/// Errors produced anywhere in the core crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite {what} at reach {reach}, step {step}")]
    NonFiniteInput {
        what: &'static str,
        reach: usize,
        step: usize,
    },

    #[error("non-finite latent state at unroll step {step}")]
    NonFiniteLatent { step: usize },

    #[error("backward already ran on this tape; call reset_grad before running it again")]
    BackwardConsumed,

    #[error("{what}: expected {expected}, found {found}")]
    Mismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("non-finite training loss at epoch {epoch}; last good checkpoint from epoch {last_good_epoch} is attached")]
    Diverged {
        epoch: usize,
        last_good_epoch: usize,
        last_good: Box<crate::grc::GrcParams>,
    },

    #[error("ablation matrix is missing cell(s): {0}")]
    MissingCell(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn mismatch(
        what: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Mismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
