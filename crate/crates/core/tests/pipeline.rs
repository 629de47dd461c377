//! End-to-end runs through the public API: training, phases and persistence.

use lipcast_core::trainer::{evaluate, run_pretrain, run_train, Dtype, Phase};
use lipcast_core::weaksup::CovariateLayout;
use lipcast_core::{synthetic, BackboneConfig, Checkpoint, LipFormer, ModelConfig, SeriesDataset, SplitKind, Tensor, TrainConfig};

fn small_backbone() -> BackboneConfig {
    let mut bb = BackboneConfig::new(16, 8, 8, 16);
    bb.heads = 2;
    bb
}

fn config(ds: &SeriesDataset, cov: bool) -> ModelConfig {
    ModelConfig {
        backbone: small_backbone(),
        channels: ds.num_channels(),
        covariates: cov.then(|| CovariateLayout::from(ds.covariates().expect("covariates").schema())),
        encoder_hidden: Some(8),
        fusion_mix: true,
    }
}

fn train_config(epochs: usize) -> TrainConfig {
    let mut tc = TrainConfig { epochs, batch_size: 16, seed: 3, ..Default::default() };
    tc.optimizer.lr = 1e-3;
    tc
}

fn params_with(model: &LipFormer, prefix: &str) -> Vec<Tensor> {
    model.store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(_, p)| p.value.clone()).collect()
}

fn driven() -> SeriesDataset {
    synthetic::covariate_driven(600, 2, 1).split_by_ratio([0.6, 0.2, 0.2], 24).expect("split")
}

#[test]
fn training_lowers_validation_error() {
    let ds = synthetic::sinusoid(600, 24, 2).split_by_ratio([0.6, 0.2, 0.2], 24).expect("split");
    let mut m = LipFormer::new(config(&ds, false), 0).expect("model");
    let before = evaluate(&m, &ds, SplitKind::Val, 64, 1.0).expect("eval").mse;
    let report = run_train(&mut m, &ds, &train_config(5), true).expect("train");
    let after = evaluate(&m, &ds, SplitKind::Val, 64, 1.0).expect("eval").mse;
    assert!(after < before, "val mse {before} -> {after}");
    let best = report.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val.to_bits(), best.to_bits());
}

#[test]
fn pretraining_leaves_forecaster_untouched() {
    let ds = driven();
    let mut m = LipFormer::new(config(&ds, true), 0).expect("model");
    let backbone = params_with(&m, "backbone.");
    let vmap = params_with(&m, "vmap.");
    let cov = params_with(&m, "cov.");
    run_pretrain(&mut m, &ds, &train_config(2)).expect("pretrain");
    assert_eq!(params_with(&m, "backbone."), backbone);
    assert_eq!(params_with(&m, "vmap."), vmap);
    assert_ne!(params_with(&m, "cov."), cov);
}

#[test]
fn frozen_encoder_survives_forecast_training() {
    let ds = driven();
    let tc = train_config(2);
    let mut pre = LipFormer::new(config(&ds, true), 0).expect("model");
    run_pretrain(&mut pre, &ds, &tc).expect("pretrain");
    let ckpt = pre.to_checkpoint(0, Phase::Pretrain, Dtype::F64);

    let mut m = LipFormer::new(config(&ds, true), 5).expect("model");
    m.load_encoders(&ckpt).expect("load encoders");
    let cov = params_with(&m, "cov.");
    assert_eq!(cov, params_with(&pre, "cov."));
    let backbone = params_with(&m, "backbone.");
    run_train(&mut m, &ds, &tc, true).expect("train");
    assert_eq!(params_with(&m, "cov."), cov);
    assert_eq!(params_with(&m, "tgt."), params_with(&pre, "tgt."));
    assert_ne!(params_with(&m, "backbone."), backbone);
}

#[test]
fn saved_model_reloads_with_identical_forecasts() {
    let ds = driven();
    let mut m = LipFormer::new(config(&ds, true), 2).expect("model");
    run_train(&mut m, &ds, &train_config(1), false).expect("train");
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("model.lipf");
    m.to_checkpoint(9, Phase::Predict, Dtype::F64).save(&path).expect("save");

    let ckpt = Checkpoint::load(&path).expect("load");
    assert_eq!(LipFormer::seed_from_checkpoint(&ckpt), Some(9));
    assert_eq!(LipFormer::phase_from_checkpoint(&ckpt), Some(Phase::Predict));
    let back = LipFormer::from_checkpoint(&ckpt).expect("rebuild");
    let a = evaluate(&m, &ds, SplitKind::Test, 64, 1.0).expect("eval");
    let b = evaluate(&back, &ds, SplitKind::Test, 64, 1.0).expect("eval");
    assert_eq!(a.mse.to_bits(), b.mse.to_bits());
    assert_eq!(a.mae_raw.to_bits(), b.mae_raw.to_bits());
}

#[test]
fn encoders_need_a_covariate_model() {
    let ds = driven();
    let pre = LipFormer::new(config(&ds, true), 0).expect("model");
    let ckpt = pre.to_checkpoint(0, Phase::Pretrain, Dtype::F64);
    let mut plain = LipFormer::new(config(&ds, false), 0).expect("model");
    assert!(plain.load_encoders(&ckpt).is_err());
}
