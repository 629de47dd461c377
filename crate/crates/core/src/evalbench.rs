//! Accuracy metrics, parameter and MAC accounting, and inference timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::numcore::{ParamStore, Tensor, TensorError};
use crate::trainer::ModelConfig;
use crate::Result;

/// Element-mean squared and absolute error.
pub fn mse_mae(pred: &Tensor, target: &Tensor) -> Result<(f64, f64), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch { op: "mse_mae", lhs: pred.shape().to_vec(), rhs: target.shape().to_vec() });
    }
    let n = pred.numel() as f64;
    let (se, ae) = pred.data().iter().zip(target.data()).fold((0.0, 0.0), |(se, ae), (p, t)| {
        let d = p - t;
        (se + d * d, ae + d.abs())
    });
    Ok((se / n, ae / n))
}

/// Number of trainable scalars.
pub fn count_params(store: &ParamStore) -> usize {
    store.trainable_elements()
}

/// MACs of the score product `QKᵀ` for `tokens` tokens of total width
/// `width` (independent of how the width is split into heads).
pub fn attention_score_macs(tokens: usize, width: usize) -> u64 {
    (tokens * tokens * width) as u64
}

fn linear_macs(positions: usize, fan_in: usize, fan_out: usize) -> u64 {
    (positions * fan_in * fan_out) as u64
}

/// Per-sample multiply-accumulate counts, grouped by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacsBreakdown {
    /// Q, K, V projections of every attention layer.
    pub attention_proj: u64,
    /// Scores and probability-weighted mixing over patch tokens.
    pub inter_attention: u64,
    /// Scores and mixing over trend tokens.
    pub cross_attention: u64,
    /// Patch embedding and mixer.
    pub embedding: u64,
    pub ffn: u64,
    pub head: u64,
    /// Covariate encoder and fusion map.
    pub covariate: u64,
}

impl MacsBreakdown {
    pub fn total(&self) -> u64 {
        self.attention_proj + self.inter_attention + self.cross_attention + self.embedding + self.ffn + self.head + self.covariate
    }
}

/// Analytic MACs of one forecast (batch of one sample, all channels).
/// Softmax, normalization and element-wise ops are not counted.
pub fn estimate_macs(config: &ModelConfig) -> Result<MacsBreakdown> {
    config.validate()?;
    let bb = &config.backbone;
    let (n, pl, hd, nt, c) = (bb.n_patches(), bb.patch_len, bb.hidden, bb.n_target_patches(), config.channels);
    let mut m = MacsBreakdown::default();
    // cross-patch: pl tokens of width n
    m.attention_proj += 3 * linear_macs(pl, n, n);
    m.cross_attention += 2 * attention_score_macs(pl, n);
    m.embedding += linear_macs(n, pl, hd); // mixer
    // inter-patch: n tokens of width hd
    m.embedding += linear_macs(n, pl, hd);
    m.attention_proj += 3 * linear_macs(n, hd, hd);
    m.inter_attention += 2 * attention_score_macs(n, hd);
    let ffn = 2 * linear_macs(n, hd, 4 * hd);
    if bb.use_ffn {
        m.ffn += ffn;
    }
    for _ in 1..bb.depth {
        m.attention_proj += 3 * linear_macs(n, hd, hd);
        m.inter_attention += 2 * attention_score_macs(n, hd);
        if bb.use_ffn {
            m.ffn += ffn;
        }
    }
    m.head += linear_macs(hd, n, nt) + linear_macs(nt, hd, pl);
    let per_series = m;
    let mut total = MacsBreakdown {
        attention_proj: per_series.attention_proj * c as u64,
        inter_attention: per_series.inter_attention * c as u64,
        cross_attention: per_series.cross_attention * c as u64,
        embedding: per_series.embedding * c as u64,
        ffn: per_series.ffn * c as u64,
        head: per_series.head * c as u64,
        covariate: 0,
    };
    if let Some(layout) = &config.covariates {
        let (l, eh) = (bb.horizon, config.encoder_hidden());
        total.covariate = linear_macs(l, layout.c_f(), eh)
            + 3 * linear_macs(l, eh, eh)
            + 2 * attention_score_macs(l, eh)
            + linear_macs(1, l * eh, l)
            + linear_macs(l, 1, c);
        if config.fusion_mix {
            total.covariate += linear_macs(1, l, l);
        }
    }
    Ok(total)
}

/// Summary of repeated wall-clock measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_s: f64,
    pub mean_s: f64,
    pub variance_s2: f64,
    pub runs: usize,
    pub warmups: usize,
    pub threads: usize,
}

/// Runs `f` `warmups` times untimed, then `runs` times timed, inside a
/// dedicated pool of `threads` workers.
pub fn time_runs(threads: usize, warmups: usize, runs: usize, mut f: impl FnMut() + Send) -> Timing {
    let threads = threads.max(1);
    let runs = runs.max(1);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
    let mut samples = pool.install(|| {
        for _ in 0..warmups {
            f();
        }
        (0..runs)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .collect::<Vec<f64>>()
    });
    let mean = samples.iter().sum::<f64>() / runs as f64;
    let variance = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / runs as f64;
    samples.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 { samples[runs / 2] } else { 0.5 * (samples[runs / 2 - 1] + samples[runs / 2]) };
    Timing { median_s: median, mean_s: mean, variance_s2: variance, runs, warmups, threads }
}

/// Minimum number of untimed warm-up forwards.
pub const MIN_WARMUPS: usize = 3;

/// Median seconds per forward of `model` on `x` (and covariates `f`).
pub fn time_inference(model: &crate::LipFormer, x: &Tensor, f: Option<&Tensor>, runs: usize, threads: usize) -> Timing {
    time_runs(threads, MIN_WARMUPS, runs, || {
        let y = model.predict(x, f).expect("forecast");
        std::hint::black_box(y);
    })
}

/// Fixed-key efficiency summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub params: usize,
    pub macs: u64,
    pub inference_s: f64,
    pub train_s_per_epoch: f64,
    pub threads: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::numcore::{init, rng_for};
    use crate::weaksup::CovariateLayout;
    use crate::LipFormer;

    fn cfg(t: usize, pl: usize, hd: usize) -> ModelConfig {
        ModelConfig { backbone: BackboneConfig::new(t, pl, pl, hd), channels: 1, covariates: None, encoder_hidden: None, fusion_mix: true }
    }

    #[test]
    fn mse_mae_examples() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(mse_mae(&a, &a).unwrap(), (0.0, 0.0));
        assert_eq!(mse_mae(&a.map(|v| v + 2.0), &a).unwrap(), (4.0, 2.0));
        let mut rng = rng_for(0, 0);
        let (p, t) = (init::normal(&mut rng, &[4, 5], 1.0), init::normal(&mut rng, &[4, 5], 1.0));
        let (mut se, mut ae) = (0.0, 0.0);
        for i in 0..4 {
            for j in 0..5 {
                let d = p.get(&[i, j]) - t.get(&[i, j]);
                se += d * d;
                ae += d.abs();
            }
        }
        let (mse, mae) = mse_mae(&p, &t).unwrap();
        assert!((mse - se / 20.0).abs() < 1e-12 && (mae - ae / 20.0).abs() < 1e-12);
        assert!(mse_mae(&p, &Tensor::zeros(&[5, 4])).is_err());
    }

    #[test]
    fn score_macs_ratio_is_pl_squared() {
        for pl in [6usize, 12, 24, 48] {
            let t = 720 - 720 % pl;
            let n = t / pl;
            assert_eq!(attention_score_macs(t, 512), attention_score_macs(n, 512) * (pl * pl) as u64);
        }
    }

    #[test]
    fn inter_attention_is_quadratic_in_patches() {
        let ns = [8usize, 16, 32, 64];
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| {
                let m = estimate_macs(&cfg(n * 12, 12, 64)).unwrap();
                ((n as f64).ln(), (m.inter_attention as f64).ln())
            })
            .collect();
        let k = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope - 2.0).abs() < 0.05);
    }

    #[test]
    fn degenerate_config_rejected() {
        assert!(estimate_macs(&cfg(48, 12, 0)).is_err());
    }

    #[test]
    fn ffn_param_delta_at_width_512() {
        let base = cfg(720, 48, 512);
        let mut with = base.clone();
        with.backbone.use_ffn = true;
        let (a, b) = (LipFormer::new(base, 0).unwrap(), LipFormer::new(with, 0).unwrap());
        assert_eq!(count_params(&b.store) - count_params(&a.store), 2_099_712);
    }

    #[test]
    fn frozen_encoder_not_counted() {
        let mut c = cfg(48, 12, 8);
        c.covariates = Some(CovariateLayout { categorical: vec![], numeric: 2 });
        let mut m = LipFormer::new(c, 0).unwrap();
        let joint = count_params(&m.store);
        m.prepare_predict(true);
        let frozen = count_params(&m.store);
        let cov: usize = m.store.iter().filter(|(_, p)| p.name.starts_with("cov.")).map(|(_, p)| p.value.numel()).sum();
        assert_eq!(joint - frozen, cov);
    }

    #[test]
    fn macs_match_linear_shapes() {
        let c = cfg(48, 12, 8);
        let m = estimate_macs(&c).unwrap();
        // n = 4, pl = 12, hd = 8, nt = 1
        assert_eq!(m.embedding, 2 * 4 * 12 * 8);
        assert_eq!(m.head, 8 * 4 + 8 * 12);
        assert_eq!(m.inter_attention, 2 * 16 * 8);
        assert_eq!(m.cross_attention, 2 * 144 * 4);
        let mut two = c.clone();
        two.channels = 2;
        assert_eq!(estimate_macs(&two).unwrap().total(), 2 * m.total());
    }

    #[test]
    fn timing_bookkeeping() {
        let mut calls = 0;
        let t = time_runs(1, 3, 1, || calls += 1);
        assert_eq!(calls, 4);
        assert_eq!((t.runs, t.threads, t.variance_s2), (1, 1, 0.0));
        assert_eq!(t.median_s, t.mean_s);
    }

    #[test]
    fn report_keys() {
        let r = EfficiencyReport { params: 1, macs: 2, inference_s: 0.5, train_s_per_epoch: 1.5, threads: 1 };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["params", "macs", "inference_s", "train_s_per_epoch", "threads"]);
    }
}
