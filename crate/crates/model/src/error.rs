use cmdrec_core::features::FeatureError;
use cmdrec_core::metrics::MetricsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid backbone configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("batch has no supervised positions")]
    NoSupervisedPositions,
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("LoRA rank {rank} is too large for {target} ({d_in}x{d_out})")]
    RankTooLarge { target: String, rank: usize, d_in: usize, d_out: usize },
    #[error("LoRA target {0} matches no parameter")]
    UnknownTarget(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: checkpoint has {expected}, vocabulary is {found}")]
    VocabMismatch { expected: String, found: String },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
