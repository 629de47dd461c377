//! One function per subcommand. Each returns a [`Failure`] that carries the
//! exit code class.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use lipcast_core::dataio::WindowIndex;
use lipcast_core::evalbench::{count_params, estimate_macs, mse_mae, time_inference, EfficiencyReport};
use lipcast_core::gradsuite::{run_suite, ToyDims};
use lipcast_core::numcore::{inject_backward_fault, OpKind};
use lipcast_core::trainer::{evaluate, run_pretrain, run_train, Dtype, EvalMetrics, Phase, TrainReport};
use lipcast_core::weaksup::write_logits_csv;
use lipcast_core::{Checkpoint, LipFormer, SeriesDataset, SplitKind};
use serde_json::json;

use crate::config::{write_json, Manifest, Overrides, RunConfig};

/// Exit 1 for problems found before any work starts, 2 for the rest.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    /// `error: <kind>: <message chain>` on a single line.
    pub fn line(&self) -> String {
        let (kind, e) = match self {
            Failure::Validation(e) => ("validation", e),
            Failure::Runtime(e) => ("runtime", e),
        };
        let msg = format!("{e:#}").replace(['\n', '\r'], " ");
        format!("error: {kind}: {msg}")
    }
}

/// Core errors that mean the inputs disagree with each other rather than
/// that a run went wrong.
fn classify(e: lipcast_core::Error) -> Failure {
    use lipcast_core::Error as E;
    match e {
        E::Config(_) | E::InvalidTrainConfig(_) | E::ConfigMismatch(_) | E::NoCovariates => Failure::Validation(e.into()),
        _ => Failure::Runtime(e.into()),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn validation(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

pub type Outcome = Result<(), Failure>;

/// Shared inputs of every command.
pub struct Ctx {
    pub config_path: Option<PathBuf>,
    pub overrides: Overrides,
    pub checkpoint: Option<PathBuf>,
    pub threads: usize,
}

impl Ctx {
    fn config(&self, apply_components: bool) -> Result<RunConfig, Failure> {
        let path = self.config_path.as_deref().ok_or_else(|| validation(anyhow!("--config is required")))?;
        RunConfig::load(path, &self.overrides, apply_components).map_err(validation)
    }

    fn manifest(&self, command: &str, cfg: &RunConfig) -> Outcome {
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            threads: self.threads,
            checkpoint: self.checkpoint.as_deref(),
            config: cfg,
        };
        write_json(&cfg.out.join(format!("{command}.manifest.json")), &m).map_err(runtime)
    }
}

fn prepare_out(cfg: &RunConfig) -> Outcome {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display())).map_err(runtime)
}

fn load_dataset(cfg: &RunConfig) -> Result<SeriesDataset, Failure> {
    cfg.load_dataset().map_err(runtime)
}

fn save_checkpoint(model: &LipFormer, seed: u64, phase: Phase, path: &Path) -> Outcome {
    model.to_checkpoint(seed, phase, Dtype::F64).save(path).map_err(runtime)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display())).map_err(runtime)
}

pub fn pretrain(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config(true)?;
    let ds = load_dataset(&cfg)?;
    if ds.covariates().is_none() {
        return Err(validation(anyhow!("pretraining needs covariates; set `covariates` or `temporal_features`")));
    }
    let mut model = LipFormer::new(cfg.model_config(&ds), cfg.seed).map_err(classify)?;
    let pre = run_pretrain(&mut model, &ds, &cfg.pretrain_config()).map_err(classify)?;
    prepare_out(&cfg)?;
    let logits_dir = cfg.out.join("logits");
    std::fs::create_dir_all(&logits_dir).map_err(runtime)?;
    for (epoch, logits) in pre.val_logits.iter().enumerate() {
        let path = logits_dir.join(format!("epoch_{epoch:03}.csv"));
        write_logits_csv(&path, logits).with_context(|| format!("cannot write {}", path.display())).map_err(runtime)?;
    }
    save_checkpoint(&model, cfg.seed, Phase::Pretrain, &cfg.out.join("pretrain.lipf"))?;
    let metrics = json!({
        "phase": "pretrain",
        "report": pre.report,
        "val_top1": pre.val_top1,
        "batch_size": cfg.pretrain_config().batch_size,
    });
    write_json(&cfg.out.join("pretrain_metrics.json"), &metrics).map_err(runtime)?;
    ctx.manifest("pretrain", &cfg)?;
    println!(
        "pretrain: best val L_sce {:.6} at epoch {} after {} steps, val top-1 {:.3}",
        pre.report.best_val, pre.report.best_epoch, pre.report.steps, pre.val_top1
    );
    Ok(())
}

struct Trained {
    model: LipFormer,
    report: TrainReport,
    val: EvalMetrics,
    test: EvalMetrics,
    freeze: bool,
}

/// Builds the model, loads pretrained encoders if given and trains the
/// forecaster. Without a pretrained encoder the covariate encoder trains
/// jointly.
fn train_model(cfg: &RunConfig, ds: &SeriesDataset, pretrained: Option<&Checkpoint>) -> Result<Trained, Failure> {
    let mut model = LipFormer::new(cfg.model_config(ds), cfg.seed).map_err(classify)?;
    let freeze = match pretrained {
        Some(ckpt) => {
            if LipFormer::phase_from_checkpoint(ckpt) != Some(Phase::Pretrain) {
                return Err(validation(anyhow!("train --checkpoint expects a pretraining checkpoint")));
            }
            model.load_encoders(ckpt).map_err(classify)?;
            cfg.freeze_encoder
        }
        None => false,
    };
    let report = run_train(&mut model, ds, &cfg.train, freeze).map_err(classify)?;
    let eval = |kind| evaluate(&model, ds, kind, cfg.train.batch_size, cfg.train.beta).map_err(classify);
    let (val, test) = (eval(SplitKind::Val)?, eval(SplitKind::Test)?);
    Ok(Trained { model, report, val, test, freeze })
}

pub fn train(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config(true)?;
    let ds = load_dataset(&cfg)?;
    let pretrained = ctx.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let t = train_model(&cfg, &ds, pretrained.as_ref())?;
    prepare_out(&cfg)?;
    save_checkpoint(&t.model, cfg.seed, Phase::Predict, &cfg.out.join("model.lipf"))?;
    let macs = estimate_macs(&t.model.config).map_err(classify)?;
    let metrics = json!({
        "phase": "predict",
        "pretrained": pretrained.is_some(),
        "freeze_encoder": t.freeze,
        "params": count_params(&t.model.store),
        "macs": macs.total(),
        "report": t.report,
        "val": t.val,
        "test": t.test,
    });
    write_json(&cfg.out.join("metrics.json"), &metrics).map_err(runtime)?;
    ctx.manifest("train", &cfg)?;
    println!("train: val mse {:.6} mae {:.6}; test mse {:.6} mae {:.6}", t.val.mse, t.val.mae, t.test.mse, t.test.mae);
    Ok(())
}

fn check_compatible(model: &LipFormer, ds: &SeriesDataset) -> Outcome {
    if model.config.channels != ds.num_channels() {
        return Err(validation(anyhow!("checkpoint has {} channel(s), dataset has {}", model.config.channels, ds.num_channels())));
    }
    if model.has_covariates() != ds.covariates().is_some() {
        return Err(validation(anyhow!("checkpoint and dataset disagree on covariates")));
    }
    Ok(())
}

/// Forecasts the final test window and writes it in original units.
pub fn predict(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config(true)?;
    let path = ctx.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.lipf"));
    let model = LipFormer::from_checkpoint(&load_checkpoint(&path)?).map_err(classify)?;
    let ds = load_dataset(&cfg)?;
    check_compatible(&model, &ds)?;
    let (t, l) = (model.config.backbone.seq_len, model.config.backbone.horizon);
    let index = WindowIndex::new(&ds, SplitKind::Test, t, l, 1).map_err(runtime)?;
    let batch = index.batch(&ds, &[index.len() - 1]);
    let y = model.predict(&batch.x, batch.f.as_ref()).map_err(classify)?;
    let start = batch.starts[0] + t;
    let c = ds.num_channels();
    let mut csv = String::from("date");
    for name in ds.channels() {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    let mut raw_pred = Vec::with_capacity(l * c);
    let mut raw_true = Vec::with_capacity(l * c);
    for k in 0..l {
        write!(csv, "{}", ds.timestamps()[start + k].format("%Y-%m-%d %H:%M:%S")).expect("string write");
        for ch in 0..c {
            let v = ds.unscale(ch, y.get(&[0, k, ch]));
            raw_pred.push(v);
            raw_true.push(ds.value(start + k, ch));
            write!(csv, ",{v}").expect("string write");
        }
        csv.push('\n');
    }
    prepare_out(&cfg)?;
    let out = cfg.out.join("forecasts.csv");
    std::fs::write(&out, csv).with_context(|| format!("cannot write {}", out.display())).map_err(runtime)?;
    let as_tensor = |v: Vec<f64>| lipcast_core::Tensor::new(&[l, c], v).expect("forecast shape");
    let (mse, mae) = mse_mae(&y, &batch.y).map_err(runtime)?;
    let (mse_raw, mae_raw) = mse_mae(&as_tensor(raw_pred), &as_tensor(raw_true)).map_err(runtime)?;
    let metrics = json!({
        "window_start": ds.timestamps()[start].format("%Y-%m-%d %H:%M:%S").to_string(),
        "mse": mse, "mae": mae, "mse_raw": mse_raw, "mae_raw": mae_raw,
    });
    write_json(&cfg.out.join("predict_metrics.json"), &metrics).map_err(runtime)?;
    ctx.manifest("predict", &cfg)?;
    println!("predict: {l} step(s) x {c} channel(s) written to {}", out.display());
    Ok(())
}

pub fn bench(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config(true)?;
    let ds = load_dataset(&cfg)?;
    let model = match ctx.checkpoint.as_deref() {
        Some(p) => LipFormer::from_checkpoint(&load_checkpoint(p)?).map_err(classify)?,
        None => LipFormer::new(cfg.model_config(&ds), cfg.seed).map_err(classify)?,
    };
    check_compatible(&model, &ds)?;
    let (t, l) = (model.config.backbone.seq_len, model.config.backbone.horizon);
    let index = WindowIndex::new(&ds, SplitKind::Test, t, l, 1).map_err(runtime)?;
    let batch = index.batch(&ds, &[0]);
    let timing = time_inference(&model, &batch.x, batch.f.as_ref(), cfg.bench.runs, ctx.threads);
    let mut one_epoch = cfg.train.clone();
    one_epoch.epochs = 1;
    let mut scratch = model.clone();
    let epoch = run_train(&mut scratch, &ds, &one_epoch, false).map_err(classify)?;
    let macs = estimate_macs(&model.config).map_err(classify)?;
    let report = EfficiencyReport {
        params: count_params(&model.store),
        macs: macs.total(),
        inference_s: timing.median_s,
        train_s_per_epoch: epoch.mean_epoch_seconds(),
        threads: timing.threads,
    };
    prepare_out(&cfg)?;
    write_json(&cfg.out.join("bench.json"), &report).map_err(runtime)?;
    write_json(&cfg.out.join("bench_detail.json"), &json!({ "macs": macs, "inference": timing })).map_err(runtime)?;
    ctx.manifest("bench", &cfg)?;
    println!(
        "bench: {} params, {} MACs, {:.6} s/inference (median of {}), {:.3} s/epoch, {} thread(s)",
        report.params, report.macs, report.inference_s, timing.runs, report.train_s_per_epoch, report.threads
    );
    Ok(())
}

pub fn gradcheck(ctx: &Ctx, inject_fault: Option<&str>) -> Outcome {
    let cfg = ctx.config_path.as_ref().map(|_| ctx.config(true)).transpose()?;
    let dims = cfg.as_ref().map(|c| c.gradcheck).unwrap_or_default();
    let seed = ctx.overrides.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    dims.validate().map_err(classify)?;
    let fault = inject_fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| validation(anyhow!("unknown op {name:?}"))))
        .transpose()?;
    inject_backward_fault(fault);
    let results = run_suite(seed, &dims);
    inject_backward_fault(None);
    let results = results.map_err(classify)?;
    let worst = results.iter().max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error)).expect("non-empty suite");
    let failed: Vec<&str> = results.iter().filter(|r| !r.report.pass).map(|r| r.name.as_str()).collect();
    if let Some(c) = &cfg {
        prepare_out(c)?;
        let cases: Vec<_> = results
            .iter()
            .map(|r| json!({ "case": r.name, "max_rel_error": r.report.max_rel_error, "pass": r.report.pass, "worst": r.worst_label() }))
            .collect();
        write_json(&c.out.join("gradcheck.json"), &json!({ "seed": seed, "dims": dims_json(&dims), "cases": cases })).map_err(runtime)?;
        ctx.manifest("gradcheck", c)?;
    }
    println!("gradcheck: {} case(s), worst {} rel {:.3e}", results.len(), worst.worst_label(), worst.report.max_rel_error);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(anyhow!(
            "gradient check failed for {}; worst {} rel {:.3e}",
            failed.join(","),
            worst.worst_label(),
            worst.report.max_rel_error
        )))
    }
}

fn dims_json(d: &ToyDims) -> serde_json::Value {
    serde_json::to_value(d).expect("dims serialize")
}

const ABLATION_HEADER: &str = "variant,seed,params_default,params_variant,macs_default,macs_variant,\
val_mse_default,val_mse_variant,test_mse_default,test_mse_variant,test_mae_default,test_mae_variant";

/// Trains the config as given and with the requested components added back,
/// then appends one comparison row.
pub fn ablate(ctx: &Ctx) -> Outcome {
    if !ctx.overrides.any_component() {
        return Err(validation(anyhow!("ablate needs at least one of --with-ln, --with-ffn, --with-pe")));
    }
    let base_cfg = ctx.config(false)?;
    let variant_cfg = ctx.config(true)?;
    let ds = load_dataset(&base_cfg)?;
    let base = train_model(&base_cfg, &ds, None)?;
    let variant = train_model(&variant_cfg, &ds, None)?;
    let macs = |m: &LipFormer| estimate_macs(&m.config).map(|b| b.total()).map_err(classify);
    let row = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        ctx.overrides.variant_name(),
        variant_cfg.seed,
        count_params(&base.model.store),
        count_params(&variant.model.store),
        macs(&base.model)?,
        macs(&variant.model)?,
        base.val.mse,
        variant.val.mse,
        base.test.mse,
        variant.test.mse,
        base.test.mae,
        variant.test.mae,
    );
    prepare_out(&variant_cfg)?;
    let path = variant_cfg.out.join("ablation.csv");
    let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("cannot open {}", path.display()))
        .map_err(runtime)?;
    if fresh {
        writeln!(file, "{ABLATION_HEADER}").map_err(runtime)?;
    }
    writeln!(file, "{row}").map_err(runtime)?;
    ctx.manifest("ablate", &variant_cfg)?;
    println!(
        "ablate {}: val mse {:.6} (default) vs {:.6} (variant)",
        ctx.overrides.variant_name(),
        base.val.mse,
        variant.val.mse
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failure_lines_are_single_line() {
        let f = Failure::Runtime(anyhow!("first\nsecond").context("outer"));
        assert_eq!(f.exit_code(), 2);
        assert_eq!(f.line(), "error: runtime: outer: first second");
        assert_eq!(Failure::Validation(anyhow!("x")).exit_code(), 1);
    }

    #[test]
    fn core_errors_classified() {
        assert_eq!(classify(lipcast_core::Error::NoCovariates).exit_code(), 1);
        assert_eq!(classify(lipcast_core::Error::Diverged(3)).exit_code(), 2);
    }

    #[test]
    fn ablation_header_columns() {
        assert_eq!(ABLATION_HEADER.split(',').count(), 12);
    }
}
