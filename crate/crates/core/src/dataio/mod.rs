//! Dataset ingestion, chronological splits, sliding windows and covariates.

mod covariates;
mod dataset;
mod temporal;
mod windows;

pub use covariates::{encode_covariates, CovariateSchema, Covariates, EncodedCovariates};
pub use dataset::{load_csv_dataset, parse_timestamp, ChannelStats, SeriesDataset, Split, SplitKind};
pub use temporal::{augment_temporal_features, temporal_features, TEMPORAL_FIELDS};
pub use windows::{make_windows, WindowBatch, WindowIndex};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("alignment: {0}")]
    Alignment(String),
    #[error("channel {0} is constant")]
    ConstantChannel(String),
    #[error("split range {kind} has {len} rows, need at least {needed}")]
    RangeTooSmall { kind: &'static str, len: usize, needed: usize },
    #[error("unknown category {value:?} for field {field}")]
    UnknownCategory { field: String, value: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("dataset already carries explicit covariates")]
    CovariatesPresent,
    #[error("dataset has no split; call split first")]
    NoSplit,
    #[error("bad window request: {0}")]
    BadWindow(String),
}
