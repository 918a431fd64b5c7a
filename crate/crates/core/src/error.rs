use thiserror::Error;

use crate::model::VoxelIndex;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("voxel {0} lies outside the grid")]
    VoxelOutsideGrid(VoxelIndex),
    #[error("invalid transmitter: {0}")]
    InvalidTransmitter(String),
    #[error("invalid receiver: {0}")]
    InvalidReceiver(String),
    #[error("invalid reaction `{id}`: {reason}")]
    InvalidReaction { id: String, reason: String },
    #[error("volume must be positive, got {0}")]
    NonPositiveVolume(f64),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("symbol {symbol} out of range (K = {k})")]
    SymbolOutOfRange { symbol: usize, k: usize },
    #[error("time horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("total propensity {total} at t = {time} s is not finite or exceeds the overflow guard")]
    PropensityOverflow { time: f64, total: f64 },
    #[error("trajectory was produced by a different model")]
    ModelMismatch,
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum OdeError {
    #[error("non-finite derivative or error estimate at t = {0} s")]
    NonFinite(f64),
    #[error("step size underflow at t = {0} s")]
    StepUnderflow(f64),
    #[error("step budget exhausted at t = {0} s")]
    TooManySteps(f64),
}

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("reference grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error("reference cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum StateSpaceError {
    #[error("enumerated state count exceeds the guard of {limit}")]
    TooLarge { limit: usize },
    #[error("probability leakage {leak:.3e} past the truncation exceeds tolerance {tol:.1e}")]
    Leakage { leak: f64, tol: f64 },
    #[error("observation at t = {time} s is impossible under the model (zero likelihood)")]
    ImpossibleObservation { time: f64 },
    #[error("observed count {count} exceeds the truncation cap at t = {time} s")]
    ObservationAboveCap { count: u32, time: f64 },
    #[error("non-finite probability mass at t = {0} s")]
    NonFinite(f64),
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Error)]
pub enum DemodError {
    #[error("missing reference signal for symbol {symbol}, receiver voxel {voxel}")]
    MissingReference { symbol: usize, voxel: usize },
    #[error("decision time {time} s lies beyond the horizon {horizon} s")]
    DecisionBeyondHorizon { time: f64, horizon: f64 },
    #[error("no replicates supplied")]
    NoReplicates,
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Error)]
pub enum LnaError {
    #[error("mean system went negative and step halving gave up after {0} attempts")]
    NegativeMean(usize),
    #[error("non-finite covariance entry at t = {0} s")]
    NonFinite(f64),
    #[error("negative rate {rate} on channel {channel} at the mean")]
    NegativeRate { channel: usize, rate: f64 },
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("scenario invalid: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Umbrella error used by the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error(transparent)]
    Demod(#[from] DemodError),
    #[error(transparent)]
    Lna(#[from] LnaError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
