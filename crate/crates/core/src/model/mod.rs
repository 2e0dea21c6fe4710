//! The age-regression network: architecture, training, prediction and
//! checkpoint serialization.

mod checkpoint;
mod network;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{Forward, LayerTap, Network, NetworkSpec};
pub use train::{best_epoch, mean_absolute_error, predict_samples, train, EpochRecord, History, Sample, TrainConfig};

use thiserror::Error;

use crate::engine::EngineError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("non-finite {what} in epoch {epoch}")]
    NonFinite { epoch: usize, what: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
