use std::io;
use std::path::PathBuf;

use efe_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    EpisodeFinished,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("variance must be strictly positive")]
    NonPositiveVariance,
    #[error("probabilities must be nonnegative and sum to one")]
    NotADistribution,
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    InputShape { what: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    State(#[from] AutodiffError),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("checkpoint has no network named `{0}`")]
    MissingNetwork(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error("buffer holds {have} records, {need} needed")]
    NotReady { have: usize, need: usize },
    #[error("record observation kind differs from the buffer's")]
    Heterogeneous,
    #[error("reward must be 1.0, found {0}")]
    InvalidReward(String),
    #[error("record references frame {0}, which is not stored")]
    MissingFrame(u64),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error("aggregation: {0}")]
    Aggregate(String),
    #[error("malformed episode csv {path}: {message}")]
    Csv { path: PathBuf, message: String },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("collection needs at least one episode")]
    NoEpisodes,
    #[error("dataset cache: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
