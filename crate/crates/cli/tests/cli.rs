use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const WEEKDAYS: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];

fn hour_stamp(i: usize) -> String {
    // 2021-01-04 is a Monday
    let (day, hour) = (4 + i / 24, i % 24);
    let (month, day) = if day <= 31 { (1, day) } else { (2, day - 31) };
    format!("2021-{month:02}-{day:02} {hour:02}:00:00")
}

/// Two-channel sinusoid, 24-step period.
fn write_sinusoid(dir: &Path, rows: usize) -> PathBuf {
    let mut s = String::from("date,y0,y1\n");
    for i in 0..rows {
        let a = 2.0 * PI * i as f64 / 24.0;
        s.push_str(&format!("{},{},{}\n", hour_stamp(i), a.sin(), 1.5 * (a + 0.7).sin()));
    }
    let path = dir.join("series.csv");
    std::fs::write(&path, s).unwrap();
    path
}

/// Weekday-scaled daily cycle with weekday and hour covariates.
fn write_weekday(dir: &Path, rows: usize) {
    let amp = [1.0, 0.3, 1.6, 0.6, 1.3, 0.2, 0.9];
    let mut series = String::from("date,load\n");
    let mut cov = String::from("date,weekday,hour\n");
    for i in 0..rows {
        let (dow, hour) = ((i / 24) % 7, i % 24);
        let v = amp[dow] * (2.0 * PI * hour as f64 / 24.0).sin();
        series.push_str(&format!("{},{v}\n", hour_stamp(i)));
        cov.push_str(&format!("{},{},{}\n", hour_stamp(i), WEEKDAYS[dow], hour));
    }
    std::fs::write(dir.join("series.csv"), series).unwrap();
    std::fs::write(dir.join("cov.csv"), cov).unwrap();
    let schema = serde_json::json!({ "categorical": { "weekday": WEEKDAYS }, "numerical": ["hour"] });
    std::fs::write(dir.join("schema.json"), schema.to_string()).unwrap();
}

fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "data": "series.csv",
        "model": { "seq_len": 48, "horizon": 24, "patch_len": 24, "hidden": 8, "heads": 2, "dropout": 0.1 },
        "train": { "epochs": 2, "batch_size": 32, "optimizer": { "lr": 0.001 } },
        "out": "out",
        "seed": 3,
        "bench": { "runs": 3 }
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn lipcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipcast")).args(args).env_remove("LIPCAST_THREADS").output().unwrap()
}

fn run_cfg(cmd: &str, cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    lipcast(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn sinusoid_setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    write_sinusoid(dir.path(), 480);
    let cfg = write_config(dir.path(), serde_json::json!({}));
    (dir, cfg)
}

#[test]
fn train_writes_checkpoint_metrics_and_manifest() {
    let (dir, cfg) = sinusoid_setup();
    let o = run_cfg("train", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(out.join("model.lipf").is_file());
    let m = read_json(&out.join("metrics.json"));
    assert!(m["val"]["mse"].as_f64().unwrap().is_finite());
    assert!(m["test"]["mse_raw"].as_f64().is_some());
    assert_eq!(m["report"]["history"].as_array().unwrap().len(), 2);
    let manifest = read_json(&out.join("train.manifest.json"));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["model"]["seq_len"], 48);
}

#[test]
fn identical_runs_are_bit_identical() {
    let (dir, cfg) = sinusoid_setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run_cfg("train", &cfg, &["--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(a.join("model.lipf")).unwrap(), std::fs::read(b.join("model.lipf")).unwrap());
    assert_eq!(std::fs::read(a.join("metrics.json")).unwrap(), std::fs::read(b.join("metrics.json")).unwrap());
    let o = run_cfg("train", &cfg, &["--out", a.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(a.join("model.lipf")).unwrap(), std::fs::read(b.join("model.lipf")).unwrap());
}

#[test]
fn predict_writes_raw_unit_forecasts() {
    let (dir, cfg) = sinusoid_setup();
    assert!(run_cfg("train", &cfg, &[]).status.success());
    let o = run_cfg("predict", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("out/forecasts.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "date,y0,y1");
    assert_eq!(lines.len(), 25);
    // the final test window ends on the last row of the file
    assert_eq!(lines[24].split(',').next().unwrap(), hour_stamp(479));
    for line in &lines[1..] {
        let v: Vec<f64> = line.split(',').skip(1).map(|s| s.parse().unwrap()).collect();
        assert_eq!(v.len(), 2);
        assert!(v[0].abs() < 3.0 && v[1].abs() < 4.5);
    }
}

#[test]
fn predict_without_checkpoint_is_runtime_error() {
    let (_dir, cfg) = sinusoid_setup();
    let o = run_cfg("predict", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = lipcast(&["forecast-everything"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: validation:"));
    assert!(err.contains("Usage"));
}

#[test]
fn invalid_config_fails_fast_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({ "model": { "seq_len": 50, "horizon": 24, "patch_len": 24, "hidden": 8 } }));
    let o = run_cfg("train", &cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: validation:"));
    assert!(!dir.path().join("out").exists());
    let o = lipcast(&["train"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let o = run_cfg("train", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: runtime:"));
}

#[test]
fn ablate_appends_rows() {
    let (dir, cfg) = sinusoid_setup();
    let o = run_cfg("ablate", &cfg, &["--with-ffn", "--with-ln"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run_cfg("ablate", &cfg, &["--with-pe"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("variant,seed,params_default,params_variant"));
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(row[0], "+ffn+ln");
    let (pd, pv): (usize, usize) = (row[2].parse().unwrap(), row[3].parse().unwrap());
    // FFN 8·hd² + 5·hd, then norms over n = 2 trend tokens and hd = 8 widths
    assert_eq!(pv - pd, 8 * 64 + 5 * 8 + 2 * 2 + 2 * 8);
    assert!(lines[2].starts_with("+pe,"));
    assert_eq!(run_cfg("ablate", &cfg, &[]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    let o = lipcast(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("worst"));
    let o = lipcast(&["gradcheck", "--inject-fault", "softmax"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("softmax"));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn gradcheck_dims_over_cap() {
    let dir = tempfile::tempdir().unwrap();
    let big = serde_json::json!({ "batch": 8, "channels": 4, "seq_len": 32, "horizon": 16, "patch_len": 8, "hidden": 8, "heads": 2 });
    let cfg = write_config(dir.path(), serde_json::json!({ "gradcheck": big }));
    let o = run_cfg("gradcheck", &cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("exceeds"));
}

#[test]
fn pretrain_then_train_on_frozen_encoder() {
    let dir = tempfile::tempdir().unwrap();
    write_weekday(dir.path(), 24 * 40);
    let cfg = write_config(dir.path(), serde_json::json!({ "covariates": "cov.csv", "schema": "schema.json", "encoder_hidden": 8 }));
    let o = run_cfg("pretrain", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let logits = std::fs::read_to_string(out.join("logits/epoch_000.csv")).unwrap();
    let rows: Vec<&str> = logits.lines().collect();
    assert_eq!(rows.len(), 32);
    assert!(rows.iter().all(|r| r.split(',').count() == 32));
    assert!(out.join("logits/epoch_001.csv").is_file());
    assert!(read_json(&out.join("pretrain_metrics.json"))["val_top1"].as_f64().is_some());
    let ckpt = out.join("pretrain.lipf");
    let o = run_cfg("train", &cfg, &["--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_json(&out.join("metrics.json"));
    assert_eq!(m["pretrained"], true);
    assert_eq!(m["freeze_encoder"], true);
    // a trained model is not a pretraining checkpoint
    let model = out.join("model.lipf");
    assert_eq!(run_cfg("train", &cfg, &["--checkpoint", model.to_str().unwrap()]).status.code(), Some(1));
    assert!(run_cfg("predict", &cfg, &[]).status.success());
}

#[test]
fn pretrain_needs_covariates() {
    let (_dir, cfg) = sinusoid_setup();
    assert_eq!(run_cfg("pretrain", &cfg, &[]).status.code(), Some(1));
}

#[test]
fn temporal_features_enable_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    write_sinusoid(dir.path(), 480);
    let cfg = write_config(dir.path(), serde_json::json!({ "temporal_features": true, "train": { "epochs": 1, "batch_size": 16 } }));
    let o = run_cfg("pretrain", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn bench_report_keys_and_thread_env() {
    let (dir, cfg) = sinusoid_setup();
    let o = Command::new(env!("CARGO_BIN_EXE_lipcast"))
        .args(["bench", "--config", cfg.to_str().unwrap()])
        .env("LIPCAST_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&dir.path().join("out/bench.json"));
    let keys: Vec<&str> = r.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["params", "macs", "inference_s", "train_s_per_epoch", "threads"]);
    assert_eq!(r["threads"], 1);
    assert!(r["inference_s"].as_f64().unwrap() > 0.0);
    assert_eq!(read_json(&dir.path().join("out/bench.manifest.json"))["threads"], 1);
    assert_eq!(lipcast(&["bench", "--config", cfg.to_str().unwrap(), "--threads", "0"]).status.code(), Some(1));
}
