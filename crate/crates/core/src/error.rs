use std::path::PathBuf;

use thiserror::Error;

use crate::matrix::MtxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mtx(#[from] MtxError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid shard: {0}")]
    InvalidShard(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("partition needs {needed} cells of label {label}, only {available} exist")]
    InsufficientCells {
        label: u32,
        needed: usize,
        available: usize,
    },

    #[error("invalid synthetic parameters: {0}")]
    InvalidSynthParams(String),

    #[error("scale {scale} leaves client {client} with {count} cells of type {label} (need >= 10)")]
    ScaleTooSmall {
        scale: f64,
        client: usize,
        label: usize,
        count: usize,
    },

    #[error("matrix has no nonzero entries")]
    ZeroMatrix,

    #[error("sketch size {sketch} out of range 1..={max}")]
    SketchSize { sketch: usize, max: usize },

    #[error("aggregated leverage scores sum to zero")]
    ZeroScoreMass,

    #[error("score vectors disagree on length: expected {expected}, got {got}")]
    ScoreLength { expected: usize, got: usize },

    #[error("cannot draw {requested} distinct indices from a support of {support}")]
    InsufficientSupport { requested: usize, support: usize },

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model configuration: {0}")]
    InvalidVaeConfig(String),

    #[error("batch of {0} is too small for the marginal term (need >= 2 when lambda > 0)")]
    BatchTooSmall(usize),

    #[error("client shard is empty")]
    EmptyShard,

    #[error("invalid federation config: {0}")]
    InvalidFedConfig(String),

    #[error("non-finite parameters after round {round} from client {client}")]
    NonFinite { round: usize, client: u32 },

    #[error("clustering: {0}")]
    Clustering(String),

    #[error("label vectors disagree on length: {0} vs {1}")]
    LabelLength(usize, usize),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("stage `{stage}` failed (seed {seed}): {source}")]
    Stage {
        stage: &'static str,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot compare runs: {0}")]
    Compare(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
