//! Lightweight patch-wise time-series forecasting with covariate-enriched
//! contrastive pretraining, on a small reverse-mode autodiff engine.

pub mod backbone;
pub mod dataio;
pub mod evalbench;
pub mod gradsuite;
pub mod numcore;
pub mod synthetic;
pub mod trainer;
pub mod weaksup;

pub use backbone::{BackboneConfig, BasePredictor, ConfigError};
pub use dataio::{DataError, SeriesDataset, SplitKind, WindowBatch};
pub use numcore::{Graph, ParamStore, Tensor, TensorError};
pub use trainer::{Checkpoint, CheckpointError, LipFormer, ModelConfig, TrainConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("covariate code {code} out of range for field {field} (vocabulary {vocab})")]
    UnknownCategory { field: String, code: f64, vocab: usize },
    #[error("dataset has no covariates")]
    NoCovariates,
    #[error("checkpoint does not match the model: {0}")]
    ConfigMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("non-finite loss at step {0}")]
    Diverged(u64),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
