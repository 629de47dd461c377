use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Dtype};
use crate::backbone::{BackboneConfig, BasePredictor};
use crate::numcore::{rng_for, Graph, ParamStore, Tensor, Var};
use crate::weaksup::{fuse_prediction, ContrastiveOutput, CovariateLayout, DualEncoder, VectorMap};
use crate::{Error, Result};

/// Stream used to draw initial weights from the run seed.
const INIT_STREAM: u64 = 0x1417;

/// Training stage a checkpoint was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Predict,
}

impl Phase {
    fn code(self) -> f64 {
        match self {
            Phase::Pretrain => 0.0,
            Phase::Predict => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Target channels c.
    pub channels: usize,
    #[serde(default)]
    pub covariates: Option<CovariateLayout>,
    /// Hidden width of both encoders; defaults to the backbone width.
    #[serde(default)]
    pub encoder_hidden: Option<usize>,
    /// Mix the covariate embedding across the horizon before the per-channel
    /// map.
    #[serde(default = "default_true")]
    pub fusion_mix: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.channels == 0 {
            return Err(crate::ConfigError::Zero("channels").into());
        }
        if self.encoder_hidden == Some(0) {
            return Err(crate::ConfigError::Zero("encoder_hidden").into());
        }
        if let Some(layout) = &self.covariates {
            if layout.c_f() == 0 {
                return Err(crate::ConfigError::Zero("covariate fields").into());
            }
            if let Some((name, _)) = layout.categorical.iter().find(|(_, v)| *v == 0) {
                return Err(Error::ConfigMismatch(format!("categorical field {name} has an empty vocabulary")));
            }
        }
        Ok(())
    }

    pub fn encoder_hidden(&self) -> usize {
        self.encoder_hidden.unwrap_or(self.backbone.hidden)
    }
}

/// Base predictor plus, when covariates are configured, the dual encoders
/// and the fusion map. Owns its parameters.
#[derive(Debug, Clone)]
pub struct LipFormer {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: BasePredictor,
    pub dual: Option<DualEncoder>,
    pub vmap: Option<VectorMap>,
}

impl LipFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let backbone = BasePredictor::new(&mut store, &mut rng, &config.backbone, "backbone")?;
        let (dual, vmap) = match &config.covariates {
            Some(layout) => {
                let dual = DualEncoder::new(&mut store, &mut rng, layout, config.channels, config.backbone.horizon, config.encoder_hidden())?;
                let vmap = VectorMap::new(&mut store, &mut rng, "vmap", config.fusion_mix.then_some(config.backbone.horizon), config.channels)?;
                (Some(dual), Some(vmap))
            }
            None => (None, None),
        };
        let mut model = Self { config, store, backbone, dual, vmap };
        model.prepare_predict(false);
        Ok(model)
    }

    pub fn has_covariates(&self) -> bool {
        self.dual.is_some()
    }

    /// Forecast `b×L×c` for inputs `x: b×T×c`, fused with the covariate
    /// embedding of `f` when the model carries covariates.
    pub fn forecast(&self, g: &mut Graph, x: &Tensor, f: Option<&Tensor>) -> Result<Var> {
        let xv = g.constant(x.clone());
        let base = self.backbone.forward(g, &self.store, xv)?;
        match (&self.dual, &self.vmap) {
            (Some(dual), Some(vmap)) => {
                let f = f.ok_or(Error::NoCovariates)?;
                let v_c = dual.covariate.forward(g, &self.store, f)?;
                Ok(fuse_prediction(g, &self.store, base, v_c, vmap)?)
            }
            _ => Ok(base),
        }
    }

    /// Plain forecast values on an inference tape.
    pub fn predict(&self, x: &Tensor, f: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::inference();
        let y = self.forecast(&mut g, x, f)?;
        Ok(g.value(y).clone())
    }

    pub fn contrastive(&self, g: &mut Graph, f: &Tensor, y: &Tensor) -> Result<ContrastiveOutput> {
        let dual = self.dual.as_ref().ok_or(Error::NoCovariates)?;
        dual.contrastive(g, &self.store, f, y)
    }

    /// Only the encoders and the temperature learn.
    pub fn prepare_pretrain(&mut self) {
        self.set_trainable(&[("backbone.", false), ("vmap.", false), ("cov.", true), ("tgt.", true), ("temperature", true)]);
    }

    /// Backbone and fusion map learn; the covariate encoder learns only when
    /// not frozen. The target encoder and temperature never take part.
    pub fn prepare_predict(&mut self, freeze_encoder: bool) {
        self.set_trainable(&[
            ("backbone.", true),
            ("vmap.", true),
            ("cov.", !freeze_encoder),
            ("tgt.", false),
            ("temperature", false),
        ]);
    }

    fn set_trainable(&mut self, rules: &[(&str, bool)]) {
        for (prefix, on) in rules {
            self.store.set_trainable_prefix(prefix, *on);
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.store.trainable_elements()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.store.iter().map(|(_, p)| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) {
        let ids: Vec<_> = self.store.ids().collect();
        for (id, v) in ids.into_iter().zip(values) {
            *self.store.get_mut(id) = v.clone();
        }
    }

    /// Parameters in store order followed by `meta.*` entries holding the
    /// config (UTF-8 JSON bytes), seed halves and phase.
    pub fn to_checkpoint(&self, seed: u64, phase: Phase, dtype: Dtype) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (_, p) in self.store.iter() {
            ckpt.push(p.name.clone(), dtype, p.value.clone());
        }
        let json = serde_json::to_string(&self.config).expect("model config serializes");
        let bytes: Vec<f64> = json.bytes().map(f64::from).collect();
        ckpt.push("meta.config", Dtype::F64, Tensor::new(&[bytes.len()], bytes).expect("non-empty config"));
        ckpt.push("meta.seed", Dtype::F64, Tensor::new(&[2], vec![(seed >> 32) as f64, (seed & 0xffff_ffff) as f64]).unwrap());
        ckpt.push("meta.phase", Dtype::F64, Tensor::scalar(phase.code()));
        ckpt
    }

    pub fn config_from_checkpoint(ckpt: &Checkpoint) -> Result<ModelConfig> {
        let raw = ckpt.get("meta.config").ok_or_else(|| Error::ConfigMismatch("checkpoint has no model config".into()))?;
        let bytes: Vec<u8> = raw.data().iter().map(|&v| v as u8).collect();
        serde_json::from_slice(&bytes).map_err(|e| Error::ConfigMismatch(format!("unreadable model config: {e}")))
    }

    pub fn seed_from_checkpoint(ckpt: &Checkpoint) -> Option<u64> {
        let s = ckpt.get("meta.seed")?;
        Some(((s.data()[0] as u64) << 32) | s.data()[1] as u64)
    }

    pub fn phase_from_checkpoint(ckpt: &Checkpoint) -> Option<Phase> {
        match ckpt.get("meta.phase")?.item() {
            v if v == 0.0 => Some(Phase::Pretrain),
            v if v == 1.0 => Some(Phase::Predict),
            _ => None,
        }
    }

    /// Rebuilds a model from a checkpoint's config and copies every tensor.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = Self::config_from_checkpoint(ckpt)?;
        let mut model = Self::new(config, 0)?;
        model.load_prefixes(ckpt, &[""])?;
        Ok(model)
    }

    /// Copies the dual encoders and temperature from a pretraining checkpoint.
    pub fn load_encoders(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if !self.has_covariates() {
            return Err(Error::ConfigMismatch("model has no covariate encoder".into()));
        }
        self.load_prefixes(ckpt, &["cov.", "tgt.", "temperature"])
    }

    fn load_prefixes(&mut self, ckpt: &Checkpoint, prefixes: &[&str]) -> Result<()> {
        let ids: Vec<_> = self.store.ids().filter(|&id| prefixes.iter().any(|p| self.store.name(id).starts_with(p))).collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let t = ckpt.get(&name).ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks {name}")))?;
            if t.shape() != self.store.get(id).shape() {
                return Err(Error::ConfigMismatch(format!("{name}: checkpoint shape {:?}, model shape {:?}", t.shape(), self.store.get(id).shape())));
            }
            *self.store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}
