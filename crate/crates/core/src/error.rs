use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("motion needs at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("primitive set is empty")]
    EmptyPrimitiveSet,
    #[error("invalid parameter range for {0}")]
    InvalidParameterRange(String),
    #[error("malformed corpus at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("no recognizable action verb in {0:?}")]
    NoActionFound(String),
    #[error("empty text")]
    EmptyText,
    #[error("node span {span:?} does not align with {tokens} tokens")]
    SpanMisalignment { span: (usize, usize), tokens: usize },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("motion of {got} frames exceeds the configured maximum {max}")]
    MotionTooLong { got: usize, max: usize },
    #[error("latent level mismatch: expected {expected}, got {got}")]
    LevelMismatch { expected: String, got: String },
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("missing guidance references")]
    MissingReferences,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("query has no in-vocabulary tokens: {0:?}")]
    OutOfVocabulary(String),
    #[error("need at least {needed} rows, got {got}")]
    InsufficientRows { needed: usize, got: usize },
    #[error("feature ids are not aligned")]
    MisalignedIds,
    #[error("groups must each hold exactly {expected} rows")]
    RaggedGroups { expected: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake_case identifier for machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::TooFewFrames { .. } => "too_few_frames",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyPrimitiveSet => "empty_primitive_set",
            Error::InvalidParameterRange(_) => "invalid_parameter_range",
            Error::Parse { .. } => "malformed_file",
            Error::Version { .. } => "version_mismatch",
            Error::NoActionFound(_) => "no_action_found",
            Error::EmptyText => "empty_text",
            Error::SpanMisalignment { .. } => "span_misalignment",
            Error::Divergence(_) => "divergence",
            Error::MotionTooLong { .. } => "motion_too_long",
            Error::LevelMismatch { .. } => "level_mismatch",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::MissingReferences => "missing_references",
            Error::EmptyCorpus => "empty_corpus",
            Error::OutOfVocabulary(_) => "out_of_vocabulary",
            Error::InsufficientRows { .. } => "insufficient_rows",
            Error::MisalignedIds => "misaligned_ids",
            Error::RaggedGroups { .. } => "ragged_groups",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Whether the failure is attributable to the caller's input.
    pub fn is_client_error(&self) -> bool {
        !matches!(self, Error::Divergence(_) | Error::Checkpoint(_) | Error::Io(_) | Error::NonFinite(_))
    }
}
