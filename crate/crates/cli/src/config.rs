//! Run configuration file, flag overrides and the reproducibility manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lipcast_core::dataio::{augment_temporal_features, load_csv_dataset};
use lipcast_core::gradsuite::ToyDims;
use lipcast_core::weaksup::CovariateLayout;
use lipcast_core::{BackboneConfig, ModelConfig, SeriesDataset, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

fn default_runs() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_runs")]
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { runs: default_runs() }
    }
}

/// Everything a run needs. Relative paths resolve against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `date,<ch1>,...` series file.
    pub data: PathBuf,
    /// Row-aligned future covariate file.
    #[serde(default)]
    pub covariates: Option<PathBuf>,
    /// Categorical vocabularies of the covariate file.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    /// Derive calendar covariates from the timestamps when no file is given.
    #[serde(default)]
    pub temporal_features: bool,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub model: BackboneConfig,
    #[serde(default)]
    pub encoder_hidden: Option<usize>,
    #[serde(default = "default_true")]
    pub fusion_mix: bool,
    #[serde(default)]
    pub train: TrainConfig,
    /// Contrastive stage settings; falls back to `train`.
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    /// Keep a loaded pretrained encoder fixed while training the forecaster.
    #[serde(default = "default_true")]
    pub freeze_encoder: bool,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gradcheck: ToyDims,
    #[serde(default)]
    pub bench: BenchConfig,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub with_ln: bool,
    pub with_ffn: bool,
    pub with_pe: bool,
}

impl Overrides {
    pub fn any_component(&self) -> bool {
        self.with_ln || self.with_ffn || self.with_pe
    }

    /// Label such as `+ffn+ln`.
    pub fn variant_name(&self) -> String {
        let mut s = String::new();
        for (on, name) in [(self.with_ffn, "+ffn"), (self.with_ln, "+ln"), (self.with_pe, "+pe")] {
            if on {
                s.push_str(name);
            }
        }
        s
    }

    pub fn apply_components(&self, model: &mut BackboneConfig) {
        model.use_ln |= self.with_ln;
        model.use_ffn |= self.with_ffn;
        model.use_pe |= self.with_pe;
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads the file, applies overrides, resolves paths and validates.
    pub fn load(path: &Path, ov: &Overrides, apply_components: bool) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data = base.join(&cfg.data);
        cfg.covariates = cfg.covariates.map(|p| base.join(p));
        cfg.schema = cfg.schema.map(|p| base.join(p));
        cfg.out = match &ov.out {
            Some(o) => o.clone(),
            None => base.join(&cfg.out),
        };
        if let Some(seed) = ov.seed {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        if let Some(p) = cfg.pretrain.as_mut() {
            p.seed = cfg.seed;
        }
        if apply_components {
            ov.apply_components(&mut cfg.model);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        if self.split.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            bail!("split ratios must be positive, got {:?}", self.split);
        }
        if self.encoder_hidden == Some(0) {
            bail!("encoder_hidden must be positive");
        }
        if self.schema.is_some() && self.covariates.is_none() {
            bail!("schema given without a covariate file");
        }
        if self.temporal_features && self.covariates.is_some() {
            bail!("temporal_features and a covariate file are mutually exclusive");
        }
        if self.bench.runs == 0 {
            bail!("bench.runs must be at least 1");
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        self.pretrain.clone().unwrap_or_else(|| self.train.clone())
    }

    pub fn load_dataset(&self) -> anyhow::Result<SeriesDataset> {
        let ds = load_csv_dataset(&self.data, self.covariates.as_deref(), self.schema.as_deref())?;
        let ds = if self.temporal_features { augment_temporal_features(&ds)? } else { ds };
        Ok(ds.split_by_ratio(self.split, self.model.seq_len + self.model.horizon)?)
    }

    pub fn model_config(&self, ds: &SeriesDataset) -> ModelConfig {
        ModelConfig {
            backbone: self.model.clone(),
            channels: ds.num_channels(),
            covariates: ds.covariates().map(|c| CovariateLayout::from(c.schema())),
            encoder_hidden: self.encoder_hidden,
            fusion_mix: self.fusion_mix,
        }
    }

    /// SHA-256 of the resolved config's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub checkpoint: Option<&'a Path>,
    pub config: &'a RunConfig,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
