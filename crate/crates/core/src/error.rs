use thiserror::Error;

/// Unified error type for the crate.
///
/// Variants carry enough context (line numbers, tweet ids, parameter
/// names) to report a failure without a backtrace.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },

    #[error("tweet `{id}`: rationale index {index} out of range for {len} tokens")]
    RationaleOutOfRange { id: String, index: usize, len: usize },

    #[error("tweet `{id}`: rationale annotations are only valid on aggression tweets")]
    RationaleOnNonAggression { id: String },

    #[error("tweet `{id}`: empty token sequence")]
    EmptyTweet { id: String },

    #[error("cannot split {count} tweets labeled `{label}` into {k} folds")]
    StratumTooSmall { label: String, count: usize, k: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenIdOutOfRange { id: u32, vocab: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("divergence undefined: target mass {p:.6} at index {index} where approximation is {q:.6}")]
    UnsupportedDivergence { index: usize, p: f64, q: f64 },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("attention target undefined for an empty rationale set")]
    EmptyRationaleSet,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("need at least {need} tokens, got {got}")]
    TooShort { need: usize, got: usize },

    #[error("group `{0}` is empty")]
    EmptyGroup(&'static str),

    #[error("evaluation input is empty")]
    EmptyEvaluation,

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("ensemble mixes model kinds")]
    MixedEnsemble,

    #[error("language model vocabulary too small: {0} distinct tokens")]
    VocabTooSmall(usize),

    #[error("sequence is empty")]
    EmptySequence,

    #[error("mutated sequence is not a single-token insertion into the original")]
    NotInsertion,

    #[error("corpus contains only one class; mining needs both")]
    SingleClassCorpus,

    #[error("corpus has {size} eligible tweets but {k} were requested")]
    CorpusSmallerThanK { size: usize, k: usize },

    #[error("pool `{pool}` has {have} items, need {need}")]
    PoolTooSmall { pool: &'static str, need: usize, have: usize },

    #[error("unknown tweet id `{0}`")]
    UnknownTweetId(String),
}

pub type Result<T> = std::result::Result<T, Error>;
