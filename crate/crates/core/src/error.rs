use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{field}` is malformed: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("target `{target}` is not one of the choices")]
    TargetNotInChoices { target: String },
    #[error("duplicate choice `{0}`")]
    DuplicateChoice(String),
    #[error("audio pair mismatch: noisy {noisy:?} vs clean {clean:?} (frames, dim)")]
    AudioMismatch {
        noisy: (usize, usize),
        clean: (usize, usize),
    },
    #[error("failed to load audio {path}: {reason}")]
    AudioLoadFailure { path: PathBuf, reason: String },
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("guidance has no unmasked content token")]
    AllMasked,
    #[error("distillation loss must be non-negative, got {0}")]
    NegativeLoss(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no valid ids for metric `{0}`")]
    EmptyValidSet(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

    /// Whether the failure comes from bad inputs (config, data) rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingField(_)
                | Error::InvalidField { .. }
                | Error::TargetNotInChoices { .. }
                | Error::DuplicateChoice(_)
                | Error::AudioMismatch { .. }
                | Error::Config(_)
        )
    }
}
