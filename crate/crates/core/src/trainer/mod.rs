//! Losses, optimization and the two training phases.

mod checkpoint;
mod model;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointError, Dtype, Entry, FORMAT_VERSION, MAGIC};
pub use model::{LipFormer, ModelConfig, Phase};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{SeriesDataset, SplitKind, WindowBatch, WindowIndex};
use crate::evalbench::mse_mae;
use crate::numcore::{rng_for, Graph, Tensor, TensorError};
use crate::weaksup::diagonal_top1;
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 0x5u64 << 32;
const VAL_STREAM: u64 = 0x7a1;
const DROPOUT_SALT_PRETRAIN: u64 = 0x9e37_79b9;
const DROPOUT_SALT_PREDICT: u64 = 0x7f4a_7c15;

/// SmoothL1 (Huber with threshold `beta`) averaged over elements.
pub fn smooth_l1_loss(pred: &Tensor, target: &Tensor, beta: f64) -> Result<f64, TensorError> {
    let mut g = Graph::inference();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let l = g.smooth_l1(p, t, beta)?;
    Ok(g.value(l).item())
}

fn d_epochs() -> usize {
    10
}
fn d_patience() -> usize {
    3
}
fn d_batch() -> usize {
    256
}
fn d_one() -> f64 {
    1.0
}
fn d_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// SmoothL1 threshold.
    #[serde(default = "d_one")]
    pub beta: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "d_one")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
    /// Step between consecutive training windows.
    #[serde(default = "d_stride")]
    pub stride: usize,
    /// Hard cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            patience: d_patience(),
            batch_size: d_batch(),
            optimizer: AdamWConfig::default(),
            beta: 1.0,
            grad_clip: 1.0,
            seed: 0,
            stride: 1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTrainConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer settings out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub steps: u64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub steps: u64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn mean_epoch_seconds(&self) -> f64 {
        self.history.iter().map(|e| e.seconds).sum::<f64>() / self.history.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub report: TrainReport,
    /// Logits of the first validation batch after each epoch.
    pub val_logits: Vec<Tensor>,
    /// Diagonal top-1 retrieval on the validation batches after the best epoch.
    pub val_top1: f64,
}

/// Tracks the best validation score and its weights.
struct EarlyStop {
    best: f64,
    best_epoch: usize,
    weights: Option<Vec<Tensor>>,
    bad_epochs: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        Self { best: f64::INFINITY, best_epoch: 0, weights: None, bad_epochs: 0, patience }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, val: f64, model: &LipFormer) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.weights = Some(model.snapshot());
            self.bad_epochs = 0;
            false
        } else {
            self.bad_epochs += 1;
            self.bad_epochs >= self.patience
        }
    }
}

fn shuffled_positions(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng_for(seed, stream));
    p
}

fn check_finite(v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(step))
    }
}

/// Fixed-order, equal-size validation batches for the contrastive score.
fn contrastive_val_batches(ds: &SeriesDataset, index: &WindowIndex, cfg: &TrainConfig) -> Result<Vec<WindowBatch>> {
    let n = index.len();
    if n < 2 {
        return Err(Error::InvalidTrainConfig(format!("validation split yields {n} window(s); contrastive scoring needs 2")));
    }
    let b = cfg.batch_size.min(n).max(2);
    let order = shuffled_positions(n, cfg.seed, VAL_STREAM);
    Ok(order.chunks_exact(b).map(|c| index.batch(ds, c)).collect())
}

fn contrastive_eval(model: &LipFormer, batches: &[WindowBatch]) -> Result<(f64, Tensor, f64)> {
    let mut total = 0.0;
    let mut hits = 0.0;
    let mut first = None;
    for batch in batches {
        let mut g = Graph::inference();
        let f = batch.f.as_ref().ok_or(Error::NoCovariates)?;
        let out = model.contrastive(&mut g, f, &batch.y)?;
        total += g.value(out.loss).item();
        let logits = g.value(out.logits);
        hits += diagonal_top1(logits);
        first.get_or_insert_with(|| logits.clone());
    }
    let k = batches.len() as f64;
    Ok((total / k, first.expect("at least one batch"), hits / k))
}

/// Contrastive pretraining of the dual encoders on (future covariate,
/// future target) pairs. Early-stops on validation `L_sce` and leaves the
/// best weights in `model`.
pub fn run_pretrain(model: &mut LipFormer, ds: &SeriesDataset, cfg: &TrainConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    if ds.covariates().is_none() || !model.has_covariates() {
        return Err(Error::NoCovariates);
    }
    let bb = &model.config.backbone;
    let (t, l) = (bb.seq_len, bb.horizon);
    let train = WindowIndex::new(ds, SplitKind::Train, t, l, cfg.stride)?;
    let val_index = WindowIndex::new(ds, SplitKind::Val, t, l, 1)?;
    let val = contrastive_val_batches(ds, &val_index, cfg)?;
    model.prepare_pretrain();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut history = Vec::new();
    let mut val_logits = Vec::new();
    let mut stopped_early = false;
    'epochs: for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = shuffled_positions(train.len(), cfg.seed, SHUFFLE_STREAM + epoch as u64);
        let (mut sum, mut count) = (0.0, 0usize);
        let mut capped = false;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            if cfg.max_steps.is_some_and(|m| opt.step >= m) {
                capped = true;
                break;
            }
            let batch = train.batch(ds, chunk);
            let f = batch.f.as_ref().ok_or(Error::NoCovariates)?;
            let mut g = Graph::training(cfg.seed ^ DROPOUT_SALT_PRETRAIN, opt.step);
            let out = model.contrastive(&mut g, f, &batch.y)?;
            let loss = check_finite(g.value(out.loss).item(), opt.step)?;
            let mut grads = g.backward(out.loss)?.for_trainable(&model.store);
            drop(g);
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.update(&mut model.store, &grads);
            sum += loss;
            count += 1;
        }
        let (val_loss, logits, _) = contrastive_eval(model, &val)?;
        val_logits.push(logits);
        history.push(EpochRecord {
            epoch,
            train_loss: sum / count.max(1) as f64,
            val_loss,
            steps: opt.step,
            seconds: start.elapsed().as_secs_f64(),
        });
        if stop.observe(epoch, val_loss, model) {
            stopped_early = true;
            break 'epochs;
        }
        if capped || cfg.max_steps.is_some_and(|m| opt.step >= m) {
            break;
        }
    }
    if let Some(w) = stop.weights.take() {
        model.restore(&w);
    }
    let (_, _, val_top1) = contrastive_eval(model, &val)?;
    model.prepare_predict(true);
    Ok(PretrainReport {
        report: TrainReport { history, best_epoch: stop.best_epoch, best_val: stop.best, steps: opt.step, stopped_early },
        val_logits,
        val_top1,
    })
}

/// Prediction training with SmoothL1. With `freeze_encoder` the covariate
/// encoder keeps its (pretrained) weights; otherwise it trains jointly.
/// Early-stops on validation SmoothL1 and restores the best weights.
pub fn run_train(model: &mut LipFormer, ds: &SeriesDataset, cfg: &TrainConfig, freeze_encoder: bool) -> Result<TrainReport> {
    cfg.validate()?;
    if model.has_covariates() && ds.covariates().is_none() {
        return Err(Error::NoCovariates);
    }
    if let Some(cov) = ds.covariates() {
        if let Some(layout) = &model.config.covariates {
            if layout.c_f() != cov.c_f() {
                return Err(Error::ConfigMismatch(format!("model expects {} covariate fields, dataset has {}", layout.c_f(), cov.c_f())));
            }
        }
    }
    if ds.num_channels() != model.config.channels {
        return Err(Error::ConfigMismatch(format!("model has {} channels, dataset has {}", model.config.channels, ds.num_channels())));
    }
    let bb = &model.config.backbone;
    let (t, l) = (bb.seq_len, bb.horizon);
    let train = WindowIndex::new(ds, SplitKind::Train, t, l, cfg.stride)?;
    let val = WindowIndex::new(ds, SplitKind::Val, t, l, 1)?;
    model.prepare_predict(freeze_encoder);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = shuffled_positions(train.len(), cfg.seed, SHUFFLE_STREAM + epoch as u64);
        let (mut sum, mut count) = (0.0, 0usize);
        let mut capped = false;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| opt.step >= m) {
                capped = true;
                break;
            }
            let batch = train.batch(ds, chunk);
            let mut g = Graph::training(cfg.seed ^ DROPOUT_SALT_PREDICT, opt.step);
            let pred = model.forecast(&mut g, &batch.x, batch.f.as_ref())?;
            let target = g.constant(batch.y.clone());
            let loss_v = g.smooth_l1(pred, target, cfg.beta)?;
            let loss = check_finite(g.value(loss_v).item(), opt.step)?;
            let mut grads = g.backward(loss_v)?.for_trainable(&model.store);
            drop(g);
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.update(&mut model.store, &grads);
            sum += loss;
            count += 1;
        }
        let val_loss = evaluate_index(model, ds, &val, cfg.batch_size, cfg.beta)?.smooth_l1;
        history.push(EpochRecord {
            epoch,
            train_loss: sum / count.max(1) as f64,
            val_loss,
            steps: opt.step,
            seconds: start.elapsed().as_secs_f64(),
        });
        if stop.observe(epoch, val_loss, model) {
            stopped_early = true;
            break;
        }
        if capped || cfg.max_steps.is_some_and(|m| opt.step >= m) {
            break;
        }
    }
    if let Some(w) = stop.weights.take() {
        model.restore(&w);
    }
    Ok(TrainReport { history, best_epoch: stop.best_epoch, best_val: stop.best, steps: opt.step, stopped_early })
}

/// Forecast accuracy over one split, on z-scored and on original units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub smooth_l1: f64,
    pub mse: f64,
    pub mae: f64,
    pub mse_raw: f64,
    pub mae_raw: f64,
    pub windows: usize,
}

pub fn evaluate(model: &LipFormer, ds: &SeriesDataset, kind: SplitKind, batch_size: usize, beta: f64) -> Result<EvalMetrics> {
    let bb = &model.config.backbone;
    let index = WindowIndex::new(ds, kind, bb.seq_len, bb.horizon, 1)?;
    evaluate_index(model, ds, &index, batch_size, beta)
}

fn evaluate_index(model: &LipFormer, ds: &SeriesDataset, index: &WindowIndex, batch_size: usize, beta: f64) -> Result<EvalMetrics> {
    let (mut sl1, mut se, mut ae, mut se_raw, mut ae_raw, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    let c = ds.num_channels();
    let stats = ds.channel_stats();
    for batch in index.batches(ds, batch_size) {
        let pred = model.predict(&batch.x, batch.f.as_ref())?;
        let k = pred.numel();
        sl1 += smooth_l1_loss(&pred, &batch.y, beta)? * k as f64;
        let (mse, mae) = mse_mae(&pred, &batch.y)?;
        se += mse * k as f64;
        ae += mae * k as f64;
        for (i, (&p, &y)) in pred.data().iter().zip(batch.y.data()).enumerate() {
            let st = &stats[i % c];
            let d = st.unscale(p) - st.unscale(y);
            se_raw += d * d;
            ae_raw += d.abs();
        }
        n += k;
    }
    let n_f = n.max(1) as f64;
    Ok(EvalMetrics { smooth_l1: sl1 / n_f, mse: se / n_f, mae: ae / n_f, mse_raw: se_raw / n_f, mae_raw: ae_raw / n_f, windows: index.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::synthetic;
    use crate::weaksup::CovariateLayout;
    use proptest::prelude::*;

    #[test]
    fn smooth_l1_examples() {
        let z = Tensor::zeros(&[3]);
        assert_eq!(smooth_l1_loss(&z, &z, 1.0).unwrap(), 0.0);
        let half = Tensor::full(&[2], 0.5);
        assert_eq!(smooth_l1_loss(&half, &Tensor::zeros(&[2]), 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1_loss(&Tensor::scalar(2.0), &Tensor::scalar(0.0), 1.0).unwrap(), 1.5);
    }

    #[test]
    fn smooth_l1_joint_is_c1() {
        let beta = 0.7;
        let f = |e: f64| smooth_l1_loss(&Tensor::scalar(e), &Tensor::scalar(0.0), beta).unwrap();
        let (lo, hi) = (f(beta - 1e-9), f(beta + 1e-9));
        assert!((lo - beta / 2.0).abs() < 1e-8 && (hi - beta / 2.0).abs() < 1e-8);
        let h = 1e-6;
        let slope_lo = (f(beta - 1e-9) - f(beta - 1e-9 - h)) / h;
        let slope_hi = (f(beta + 1e-9 + h) - f(beta + 1e-9)) / h;
        assert!((slope_lo - 1.0).abs() < 1e-5 && (slope_hi - 1.0).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn smooth_l1_bounds(e in -10.0f64..10.0, beta in 0.01f64..5.0) {
            let v = smooth_l1_loss(&Tensor::scalar(e), &Tensor::scalar(0.0), beta).unwrap();
            prop_assert!(v <= e.abs() + 1e-15);
            if e.abs() < beta {
                prop_assert!((v - e * e / (2.0 * beta)).abs() < 1e-12);
            }
        }
    }

    fn sine_model(seed: u64) -> (LipFormer, SeriesDataset) {
        let ds = synthetic::sinusoid(600, 24, 1).split_by_ratio([0.6, 0.2, 0.2], 48).unwrap();
        let mut bb = BackboneConfig::new(24, 24, 12, 8);
        bb.heads = 2;
        let cfg = ModelConfig { backbone: bb, channels: 1, covariates: None, encoder_hidden: None, fusion_mix: true };
        (LipFormer::new(cfg, seed).unwrap(), ds)
    }

    #[test]
    fn early_stopping_keeps_best_weights() {
        let (mut model, ds) = sine_model(1);
        let mut cfg = TrainConfig { epochs: 4, patience: 0, batch_size: 32, ..Default::default() };
        cfg.optimizer.lr = 0.5; // unstable on purpose
        let report = run_train(&mut model, &ds, &cfg, true).unwrap();
        let best = report.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val, best);
        let now = evaluate(&model, &ds, SplitKind::Val, 32, 1.0).unwrap().smooth_l1;
        assert_eq!(now, best);
        if report.stopped_early {
            let last = report.history.last().unwrap();
            assert!(last.val_loss >= best && report.history.len() == report.best_epoch + 2);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { epochs: 2, batch_size: 16, max_steps: Some(12), ..Default::default() };
        let run = || {
            let (mut m, ds) = sine_model(5);
            let r = run_train(&mut m, &ds, &cfg, true).unwrap();
            (m.to_checkpoint(5, Phase::Predict, Dtype::F64).to_bytes(), serde_json::to_string(&r).unwrap())
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn pretrain_requires_covariates() {
        let (mut model, ds) = sine_model(1);
        assert!(matches!(run_pretrain(&mut model, &ds, &TrainConfig::default()), Err(Error::NoCovariates)));
    }

    #[test]
    fn pretrain_leaves_backbone_untouched() {
        let ds = synthetic::covariate_driven(400, 2, 3).split_by_ratio([0.6, 0.2, 0.2], 16).unwrap();
        let mut bb = BackboneConfig::new(8, 8, 4, 4);
        bb.heads = 1;
        let layout = CovariateLayout { categorical: vec![], numeric: 2 };
        let mut m = LipFormer::new(ModelConfig { backbone: bb, channels: 1, covariates: Some(layout), encoder_hidden: None, fusion_mix: true }, 2).unwrap();
        let before = m.store.clone();
        let cfg = TrainConfig { epochs: 1, batch_size: 16, max_steps: Some(3), ..Default::default() };
        let r = run_pretrain(&mut m, &ds, &cfg).unwrap();
        assert_eq!(r.report.steps, 3);
        assert_eq!(r.val_logits.len(), 1);
        assert_eq!(r.val_logits[0].shape(), &[16, 16]);
        for (id, p) in m.store.iter() {
            if p.name.starts_with("backbone.") || p.name.starts_with("vmap.") {
                assert_eq!(&p.value, before.get(id));
            }
        }
        assert_ne!(m.store, before);
    }

    #[test]
    fn frozen_encoder_is_bit_identical_after_training() {
        let ds = synthetic::covariate_driven(300, 1, 4).split_by_ratio([0.6, 0.2, 0.2], 16).unwrap();
        let mut bb = BackboneConfig::new(8, 8, 4, 4);
        bb.heads = 1;
        let layout = CovariateLayout { categorical: vec![], numeric: 1 };
        let mut m = LipFormer::new(ModelConfig { backbone: bb, channels: 1, covariates: Some(layout), encoder_hidden: None, fusion_mix: true }, 3).unwrap();
        let cov_before: Vec<_> = m.store.iter().filter(|(_, p)| p.name.starts_with("cov.")).map(|(_, p)| p.value.clone()).collect();
        let vmap_before = m.store.get(m.store.id("vmap.weight").unwrap()).clone();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, max_steps: Some(2), ..Default::default() };
        run_train(&mut m, &ds, &cfg, true).unwrap();
        let cov_after: Vec<_> = m.store.iter().filter(|(_, p)| p.name.starts_with("cov.")).map(|(_, p)| p.value.clone()).collect();
        assert_eq!(cov_before, cov_after);
        assert_ne!(&vmap_before, m.store.get(m.store.id("vmap.weight").unwrap()));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { beta: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::InvalidTrainConfig(_))));
        }
        let json: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(json, TrainConfig::default());
    }

    #[test]
    fn metrics_in_raw_units() {
        let (model, ds) = sine_model(9);
        let m = evaluate(&model, &ds, SplitKind::Test, 64, 1.0).unwrap();
        let std = ds.channel_stats()[0].std;
        assert!((m.mse_raw - m.mse * std * std).abs() < 1e-9 * m.mse_raw.max(1.0));
        assert!((m.mae_raw - m.mae * std).abs() < 1e-9 * m.mae_raw.max(1.0));
    }
}
