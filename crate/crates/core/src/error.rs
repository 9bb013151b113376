use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("placement failed: could not place object {object} after {attempts} attempts")]
    PlacementFailed { object: usize, attempts: usize },

    #[error("unknown target instance {0}")]
    UnknownTarget(i64),

    #[error("out-of-vocabulary word {0:?}")]
    OutOfVocabulary(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("waveform has {0} samples, need at least 400")]
    WaveformTooShort(usize),

    #[error("beta must lie in [0, 1], got {0}")]
    InvalidBeta(f64),

    #[error("row {0} has zero norm")]
    ZeroNorm(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("asset: {0}")]
    Asset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
