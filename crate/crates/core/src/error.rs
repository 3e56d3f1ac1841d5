use thiserror::Error;

#[derive(Debug, Error)]
pub enum NepError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("cohort is empty")]
    EmptyCohort,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("chain is not ergodic; per-component entropies: {components:?}")]
    NonErgodic {
        /// (states in the closed class, entropy rate in nats)
        components: Vec<(Vec<usize>, f64)>,
    },

    #[error("no eligible targets for any event type")]
    NoEligibleTargets,

    #[error("input of {len} tokens exceeds the {max} position limit")]
    Overlength { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("loss mask selects no positions")]
    EmptyLossMask,

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("adapter rank mismatch: {0}")]
    RankMismatch(String),

    #[error("adapters `{0}` are already merged into these parameters")]
    AlreadyMerged(String),

    #[error("single-class labels")]
    SingleClass,

    #[error("no comparable pairs")]
    NoComparablePairs,

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NepError> = std::result::Result<T, E>;
