//! The patch-wise base predictor.

pub mod layers;
mod predictor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::{FeedForward, LayerNorm, Linear, SelfAttention};
pub use predictor::{
    instance_denormalize, instance_normalize, patchify, trend_view, BasePredictor, CrossPatch, ExtraBlock, InterPatch,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{what}={value} is not divisible by {by_name}={by}")]
    NotDivisible { what: &'static str, value: usize, by_name: &'static str, by: usize },
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("dropout {0} outside [0, 1)")]
    Dropout(String),
}

fn default_heads() -> usize {
    4
}
fn default_one() -> usize {
    1
}
fn default_dropout() -> f64 {
    0.5
}

/// Shape and ablation settings of the base predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub seq_len: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_one")]
    pub cross_heads: usize,
    #[serde(default = "default_one")]
    pub depth: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub use_ln: bool,
    #[serde(default)]
    pub use_ffn: bool,
    #[serde(default)]
    pub use_pe: bool,
}

impl BackboneConfig {
    /// Defaults for everything except the four shape knobs.
    pub fn new(seq_len: usize, horizon: usize, patch_len: usize, hidden: usize) -> Self {
        Self {
            seq_len,
            horizon,
            patch_len,
            hidden,
            heads: default_heads(),
            cross_heads: 1,
            depth: 1,
            dropout: default_dropout(),
            use_ln: false,
            use_ffn: false,
            use_pe: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("seq_len", self.seq_len),
            ("horizon", self.horizon),
            ("patch_len", self.patch_len),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("cross_heads", self.cross_heads),
            ("depth", self.depth),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        let div = |what, value: usize, by_name, by: usize| {
            if value.is_multiple_of(by) {
                Ok(())
            } else {
                Err(ConfigError::NotDivisible { what, value, by_name, by })
            }
        };
        div("seq_len", self.seq_len, "patch_len", self.patch_len)?;
        div("horizon", self.horizon, "patch_len", self.patch_len)?;
        div("hidden", self.hidden, "heads", self.heads)?;
        div("n_patches", self.n_patches(), "cross_heads", self.cross_heads)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Dropout(self.dropout.to_string()));
        }
        Ok(())
    }

    /// n = T / pl
    pub fn n_patches(&self) -> usize {
        self.seq_len / self.patch_len
    }

    /// nt = L / pl
    pub fn n_target_patches(&self) -> usize {
        self.horizon / self.patch_len
    }
}
