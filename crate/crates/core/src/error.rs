//! Crate-wide error type.

use crate::model::Mode;

/// Errors produced by model construction, identification, LMI assembly,
/// solving, and simulation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("input history has {got} samples, need at least {required} to read the delayed input")]
    InsufficientHistory { required: usize, got: usize },

    #[error("steady state undefined: pole at one for mode {mode}")]
    PoleAtOne { mode: Mode },

    #[error("invalid step-test log: {0}")]
    InvalidLog(String),

    #[error("invalid delay range: {0}")]
    InvalidDelayRange(String),

    #[error("mode {mode} never occurs in the log")]
    EmptySegment { mode: Mode },

    #[error("not enough usable samples for mode {mode} at delay {delay}: need {required}, found {got}")]
    InsufficientSamples {
        mode: Mode,
        delay: usize,
        required: usize,
        got: usize,
    },

    #[error("regressor matrix is rank deficient for mode {mode} at delay {delay}")]
    RankDeficient { mode: Mode, delay: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("window too short: need {required} entries, got {got}")]
    ShortWindow { required: usize, got: usize },

    #[error("malformed LMI system: {0}")]
    MalformedSystem(String),

    #[error("invalid gain grid: {0}")]
    InvalidGrid(String),

    #[error("no feasible gain pair in the constrained region")]
    EmptyRegion,

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("trace is not a regulated run: {0}")]
    NotRegulated(String),

    #[error("invalid cost weights: {0}")]
    InvalidWeights(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
