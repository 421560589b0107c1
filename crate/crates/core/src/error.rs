use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown feature stage {stage} (extractor has {n_stages})")]
    UnknownStage { stage: usize, n_stages: usize },

    #[error("feature stage mismatch: map is stage {map}, stats are stage {stats}")]
    StageMismatch { map: usize, stats: usize },

    #[error("no feature statistics for stage {stage} at {resolution}x{resolution}")]
    MissingStats { stage: usize, resolution: usize },

    #[error("resolution mismatch: model expects {expected}x{expected}, got {actual}x{actual}")]
    Resolution { expected: usize, actual: usize },

    #[error("model is already at its target resolution ({0}x{0})")]
    FullyGrown(usize),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("need both normal and anomalous samples to compute ROC AUC ({n_normal} normal, {n_anomalous} anomalous)")]
    SingleClass { n_normal: usize, n_anomalous: usize },

    #[error("non-finite loss at step {step} (level {level}, alpha {alpha})")]
    NonFinite { step: usize, level: usize, alpha: f64 },

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("insufficient anomaly pool: {0}")]
    InsufficientPool(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("image decode error for {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("refusing to overwrite existing {0} (pass --force)")]
    Exists(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
