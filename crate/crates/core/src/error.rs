use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector contains non-finite values")]
    NonFinite,
    #[error("vector is not unit-norm (norm = {0})")]
    NotUnitNorm(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("temperature {0} outside [1e-3, 100]")]
    TemperatureOutOfRange(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported teacher dimension {0} (expected 512 or 768)")]
    UnsupportedTeacherDim(usize),
    #[error("unknown teacher id {0}")]
    UnknownTeacher(u16),
    #[error("corpus has {available} candidate texts, need {needed}")]
    CorpusTooSmall { available: usize, needed: usize },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("negative duration {0}")]
    NegativeDuration(f64),
    #[error("no events observed")]
    NoEvents,
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported shard version {0}")]
    UnsupportedVersion(u32),
    #[error("shard truncated: {0}")]
    Truncated(String),
    #[error("record count mismatch: header says {header}, file holds {actual}")]
    CountMismatch { header: u64, actual: u64 },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("duplicate pair (image {image_id}, text {text_id})")]
    DuplicatePair { image_id: u64, text_id: u64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
