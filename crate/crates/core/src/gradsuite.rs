//! Finite-difference checks of every differentiable op and of the composed
//! model at toy sizes.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::numcore::{finite_diff_check, init, rng_for, GradCheckReport, Graph, ParamStore, Rng, Tensor, TensorError, Var};
use crate::trainer::{LipFormer, ModelConfig};
use crate::weaksup::CovariateLayout;
use crate::{Error, Result};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Upper bound on the product of the toy dimensions.
pub const DIMS_CAP: usize = 10_000;

/// Sizes of the composed-model checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    pub batch: usize,
    pub channels: usize,
    pub seq_len: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self { batch: 2, channels: 2, seq_len: 8, horizon: 4, patch_len: 4, hidden: 6, heads: 2 }
    }
}

impl ToyDims {
    pub fn product(&self) -> usize {
        [self.batch, self.channels, self.seq_len, self.horizon, self.patch_len, self.hidden].iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.product() > DIMS_CAP {
            return Err(Error::InvalidTrainConfig(format!("toy dims product {} exceeds {DIMS_CAP}", self.product())));
        }
        if self.batch < 2 {
            return Err(Error::InvalidTrainConfig("gradient check needs batch >= 2".into()));
        }
        self.backbone().validate()?;
        Ok(())
    }

    fn backbone(&self) -> BackboneConfig {
        let mut c = BackboneConfig::new(self.seq_len, self.horizon, self.patch_len, self.hidden);
        c.heads = self.heads;
        c
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CaseResult {
    /// `case/param` of the worst entry.
    pub fn worst_label(&self) -> String {
        match self.report.worst() {
            Some(p) => format!("{}/{}", self.name, p.name),
            None => self.name.clone(),
        }
    }
}

type Builder = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var, TensorError>>;

struct Case {
    name: String,
    store: ParamStore,
    f: Builder,
}

/// Random-weighted sum, so every output element reaches the loss with a
/// distinct O(1) coefficient.
fn probe_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    init::normal(rng, shape, 1.0)
}

fn unary_case(name: &str, seed: u64, shape: &[usize], op: impl Fn(&mut Graph, Var) -> Result<Var, TensorError> + 'static) -> Case {
    let mut rng = rng_for(seed, 100);
    let mut store = ParamStore::new();
    store.add("x", normal(&mut rng, shape)).expect("fresh store");
    let f = move |g: &mut Graph, s: &ParamStore| -> Result<Var, TensorError> {
        let x = g.param(s, s.id("x").expect("x"));
        let out = op(g, x)?;
        let w = normal(&mut rng_for(seed, 101), g.shape(out));
        probe_sum(g, out, &w)
    };
    Case { name: name.to_string(), store, f: Box::new(f) }
}

fn multi_case(
    name: &str,
    seed: u64,
    inputs: Vec<(&str, Tensor)>,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + 'static,
) -> Case {
    let mut store = ParamStore::new();
    for (n, t) in inputs {
        store.add(n, t).expect("unique names");
    }
    let f = move |g: &mut Graph, s: &ParamStore| -> Result<Var, TensorError> {
        let vars: Vec<Var> = s.ids().map(|id| g.param(s, id)).collect();
        let out = op(g, &vars)?;
        if g.shape(out).is_empty() {
            return Ok(out);
        }
        let w = normal(&mut rng_for(seed, 201), g.shape(out));
        probe_sum(g, out, &w)
    };
    Case { name: name.to_string(), store, f: Box::new(f) }
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = rng_for(seed, 7);
    let mut cases = vec![
        unary_case("scale", seed, &[3, 4], |g, x| Ok(g.scale(x, -1.7))),
        unary_case("exp", seed, &[3, 4], |g, x| Ok(g.exp(x))),
        unary_case("clamp_max", seed, &[3, 4], |g, x| Ok(g.clamp_max(x, 0.5))),
        unary_case("gelu", seed, &[3, 4], |g, x| Ok(g.gelu(x))),
        unary_case("dropout", seed, &[3, 4], |g, x| Ok(g.dropout(x, 0.5))),
        unary_case("permute", seed, &[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1])),
        unary_case("transpose", seed, &[2, 3, 4], |g, x| g.transpose_last2(x)),
        unary_case("reshape", seed, &[2, 3, 4], |g, x| g.reshape(x, &[4, 6])),
        unary_case("narrow", seed, &[2, 5, 3], |g, x| g.narrow(x, 1, 1, 3)),
        unary_case("expand", seed, &[2, 1, 3], |g, x| g.expand(x, 1, 4)),
        unary_case("softmax", seed, &[3, 5], |g, x| g.softmax(x)),
        unary_case("normalize_rows", seed, &[3, 5], |g, x| g.normalize_rows(x)),
        unary_case("sum", seed, &[3, 4], |g, x| Ok(g.sum(x))),
        unary_case("mean", seed, &[3, 4], |g, x| Ok(g.mean(x))),
    ];
    cases.push(multi_case("add", seed, vec![("a", normal(&mut r, &[2, 3, 4])), ("b", normal(&mut r, &[4]))], |g, v| g.add(v[0], v[1])));
    cases.push(multi_case("sub", seed, vec![("a", normal(&mut r, &[2, 3, 4])), ("b", normal(&mut r, &[3, 4]))], |g, v| g.sub(v[0], v[1])));
    cases.push(multi_case("mul", seed, vec![("a", normal(&mut r, &[2, 3, 4])), ("b", normal(&mut r, &[3, 4]))], |g, v| g.mul(v[0], v[1])));
    cases.push(multi_case("mul_scalar", seed, vec![("a", normal(&mut r, &[3, 4])), ("b", Tensor::scalar(0.8))], |g, v| g.mul(v[0], v[1])));
    cases.push(multi_case("matmul_batched", seed, vec![("a", normal(&mut r, &[2, 3, 4])), ("b", normal(&mut r, &[2, 4, 5]))], |g, v| {
        g.matmul(v[0], v[1])
    }));
    cases.push(multi_case("matmul_shared_rhs", seed, vec![("a", normal(&mut r, &[2, 3, 4])), ("b", normal(&mut r, &[4, 5]))], |g, v| {
        g.matmul(v[0], v[1])
    }));
    cases.push(multi_case("matmul_shared_lhs", seed, vec![("a", normal(&mut r, &[3, 4])), ("b", normal(&mut r, &[2, 4, 5]))], |g, v| {
        g.matmul(v[0], v[1])
    }));
    cases.push(multi_case("concat", seed, vec![("a", normal(&mut r, &[2, 3, 1])), ("b", normal(&mut r, &[2, 3, 2]))], |g, v| {
        g.concat_last(v)
    }));
    cases.push(multi_case(
        "layer_norm",
        seed,
        vec![("x", normal(&mut r, &[3, 5])), ("gamma", normal(&mut r, &[5])), ("beta", normal(&mut r, &[5]))],
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    ));
    cases.push(multi_case("embedding", seed, vec![("table", normal(&mut r, &[4, 2]))], |g, v| g.embedding(v[0], &[3, 0, 0, 2, 1, 3], &[2, 3])));
    // keep differences away from the SmoothL1 joint at |e| = beta
    let target = normal(&mut r, &[3, 4]);
    let pred = Tensor::from_fn(&[3, 4], |i| target.data()[i] + [0.3, -0.6, 1.7, -2.4][i % 4]);
    cases.push(multi_case("smooth_l1", seed, vec![("pred", pred), ("target", target)], |g, v| g.smooth_l1(v[0], v[1], 1.0)));
    cases.push(multi_case("cross_entropy", seed, vec![("logits", normal(&mut r, &[4, 3]))], |g, v| g.cross_entropy(v[0], &[2, 0, 1, 1])));
    cases
}

fn model_case(name: &str, seed: u64, dims: &ToyDims, configure: impl Fn(&mut ModelConfig), contrastive: bool) -> Result<Case> {
    let mut cfg = ModelConfig { backbone: dims.backbone(), channels: dims.channels, covariates: None, encoder_hidden: None, fusion_mix: true };
    configure(&mut cfg);
    let mut model = LipFormer::new(cfg, seed)?;
    // non-zero biases so their paths are exercised
    let mut rng = rng_for(seed, 300);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        if name.ends_with(".bias") || name.ends_with(".beta") {
            let shape = model.store.get(id).shape().to_vec();
            *model.store.get_mut(id) = init::normal(&mut rng, &shape, 0.1);
        }
        model.store.set_trainable(id, true);
    }
    let (b, c, t, l) = (dims.batch, dims.channels, dims.seq_len, dims.horizon);
    let x = normal(&mut rng, &[b, t, c]);
    let y = normal(&mut rng, &[b, l, c]);
    let w = normal(&mut rng, &[b, l, c]);
    let f = model.config.covariates.as_ref().map(|layout| {
        let c_f = layout.c_f();
        let vocab: Vec<usize> = layout.categorical.iter().map(|(_, v)| *v).collect();
        let mut codes = rng_for(seed, 301);
        let noise = normal(&mut codes, &[b * l * c_f]);
        Tensor::from_fn(&[b, l, c_f], |i| {
            let j = i % c_f;
            if j < vocab.len() {
                ((noise.data()[i].abs() * 1000.0) as usize % vocab[j]) as f64
            } else {
                noise.data()[i]
            }
        })
    });
    let store = model.store.clone();
    let f_model = move |g: &mut Graph, s: &ParamStore| -> Result<Var, TensorError> {
        let mut m = model.clone();
        m.store = s.clone();
        let run = |g: &mut Graph| -> Result<Var> {
            if contrastive {
                Ok(m.contrastive(g, f.as_ref().expect("covariates"), &y)?.loss)
            } else {
                let pred = m.forecast(g, &x, f.as_ref())?;
                Ok(probe_sum(g, pred, &w)?)
            }
        };
        run(g).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::NonFinite { param: other.to_string() },
        })
    };
    Ok(Case { name: name.to_string(), store, f: Box::new(f_model) })
}

fn model_cases(seed: u64, dims: &ToyDims) -> Result<Vec<Case>> {
    let layout = CovariateLayout { categorical: vec![("day".into(), 3)], numeric: 2 };
    let hidden = dims.hidden;
    let with_cov = move |c: &mut ModelConfig| {
        c.covariates = Some(layout.clone());
        c.encoder_hidden = Some(hidden);
    };
    Ok(vec![
        model_case("base_forward", seed, dims, |_| {}, false)?,
        model_case(
            "base_forward_ablated",
            seed,
            dims,
            |c| {
                c.backbone.use_ln = true;
                c.backbone.use_ffn = true;
                c.backbone.use_pe = true;
                c.backbone.depth = 2;
            },
            false,
        )?,
        model_case("fused_forecast", seed, dims, with_cov.clone(), false)?,
        model_case("contrastive", seed, dims, with_cov, true)?,
    ])
}

/// Runs every op case and every composed-model case for one seed.
pub fn run_suite(seed: u64, dims: &ToyDims) -> Result<Vec<CaseResult>> {
    dims.validate()?;
    let mut cases = op_cases(seed);
    cases.extend(model_cases(seed, dims)?);
    cases
        .into_iter()
        .map(|c| {
            let report = finite_diff_check(&c.f, &c.store, EPSILON, TOLERANCE)?;
            Ok(CaseResult { name: c.name, report })
        })
        .collect()
}
