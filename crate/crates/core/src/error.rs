use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("malformed task document: {0}")]
    MalformedTask(String),
    #[error("missing label placeholder")]
    MissingLabelPlaceholder,
    #[error("duplicate placeholder {0}")]
    DuplicatePlaceholder(String),
    #[error("empty seed label list")]
    EmptySeeds,
    #[error("at least two seed labels are required, got {0}")]
    TooFewSeeds(usize),
    #[error("duplicate seed label {0:?}")]
    DuplicateSeed(String),
    #[error("empty seed label")]
    EmptySeed,
    #[error("seed label {label:?} is not a single token (tokenizes to {tokens} tokens)")]
    MultiTokenSeed { label: String, tokens: usize },
    #[error("missing value for placeholder {0}")]
    MissingPlaceholderValue(String),
    #[error("input for placeholder {0} contains the reserved mask token")]
    ReservedTokenInInput(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("invalid token {0:?}")]
    InvalidToken(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("empty datastore")]
    EmptyDatastore,
    #[error("seed {0:?} not in datastore")]
    SeedNotInDatastore(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("invalid mining config: {0}")]
    InvalidMiningConfig(String),
    #[error("empty neighbor set")]
    EmptyNeighborSet,

    #[error("empty neighbor list")]
    EmptyNeighbors,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,

    #[error("mask index {index} out of range for {len} tokens")]
    InvalidMaskIndex { index: usize, len: usize },
    #[error("target {0:?} not in vocabulary")]
    TargetNotInVocab(String),
    #[error("seed label {0:?} not in vocabulary")]
    SeedNotInVocab(String),
    #[error("all example weights are zero")]
    ZeroWeights,
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("target {0:?} is not covered by any neighbor set")]
    UncoveredTarget(String),
    #[error("duplicate task name {0:?}")]
    DuplicateTask(String),

    #[error("no evaluation examples")]
    EmptyEvalSet,
    #[error("gold label {0:?} is not a seed label of the task")]
    UnknownGold(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
}
