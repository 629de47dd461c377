//! Dual encoders over future covariates and targets, their symmetric
//! contrastive objective, and the residual fusion into forecasts.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Linear, SelfAttention};
use crate::dataio::CovariateSchema;
use crate::numcore::{init, Graph, ParamId, ParamStore, Rng, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Upper clamp of the learned logit scale `e^t`.
pub const LOGIT_SCALE_MAX: f64 = 100.0;

/// Initial log temperature, `ln(1 / 0.07)`.
pub fn initial_log_temperature() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Column layout of the covariate block: categorical codes first, then
/// numeric values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateLayout {
    /// `(field name, vocabulary size)` per categorical field.
    pub categorical: Vec<(String, usize)>,
    pub numeric: usize,
}

impl CovariateLayout {
    pub fn c_t(&self) -> usize {
        self.categorical.len()
    }

    pub fn c_f(&self) -> usize {
        self.categorical.len() + self.numeric
    }
}

impl From<&CovariateSchema> for CovariateLayout {
    fn from(s: &CovariateSchema) -> Self {
        Self { categorical: s.field_names().zip(s.vocab_sizes()).map(|(n, v)| (n.to_string(), v)).collect(), numeric: s.c_n() }
    }
}

/// Shared tail of both encoders: residual single-head attention, flatten,
/// then `(L·hd) → L`.
#[derive(Debug, Clone)]
pub struct EncoderTrunk {
    pub attn: SelfAttention,
    pub project: Linear,
    pub horizon: usize,
    pub hidden: usize,
}

impl EncoderTrunk {
    fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, horizon: usize, hidden: usize) -> Result<Self, TensorError> {
        Ok(Self {
            attn: SelfAttention::new(store, rng, &format!("{prefix}.attn"), hidden, 1)?,
            project: Linear::new(store, rng, &format!("{prefix}.mlp2"), horizon * hidden, horizon, true)?,
            horizon,
            hidden,
        })
    }

    /// `b×L×hd` → `b×L`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, m: Var) -> Result<Var, TensorError> {
        let b = g.shape(m)[0];
        let a = self.attn.forward(g, store, m)?;
        let r = g.add(a, m)?;
        let flat = g.reshape(r, &[b, self.horizon * self.hidden])?;
        self.project.forward(g, store, flat)
    }
}

/// Encodes a future covariate window `b×L×c_f` into `V_C: b×L`.
#[derive(Debug, Clone)]
pub struct CovariateEncoder {
    pub layout: CovariateLayout,
    /// One `V_k × 1` table per categorical field.
    pub tables: Vec<ParamId>,
    pub mlp1: Linear,
    pub trunk: EncoderTrunk,
}

impl CovariateEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, layout: &CovariateLayout, horizon: usize, hidden: usize) -> Result<Self, TensorError> {
        let mut tables = Vec::with_capacity(layout.c_t());
        for (k, (_, vocab)) in layout.categorical.iter().enumerate() {
            tables.push(store.add(format!("{prefix}.embed{k}"), init::normal(rng, &[*vocab, 1], 1.0))?);
        }
        Ok(Self {
            layout: layout.clone(),
            tables,
            mlp1: Linear::new(store, rng, &format!("{prefix}.mlp1"), layout.c_f(), hidden, true)?,
            trunk: EncoderTrunk::new(store, rng, prefix, horizon, hidden)?,
        })
    }

    /// Embeds categorical columns to one value each and concatenates the
    /// numeric columns: `b×L×c_f`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, f: &Tensor) -> Result<Var> {
        let shape = f.shape();
        let c_f = self.layout.c_f();
        if shape.len() != 3 || shape[1] != self.trunk.horizon || shape[2] != c_f {
            return Err(TensorError::ShapeMismatch { op: "covariate_encode", lhs: shape.to_vec(), rhs: vec![self.trunk.horizon, c_f] }.into());
        }
        if self.tables.is_empty() {
            return Ok(g.constant(f.clone()));
        }
        let rows = shape[0] * shape[1];
        let mut parts = Vec::with_capacity(self.tables.len() + 1);
        for (k, &table) in self.tables.iter().enumerate() {
            let (field, vocab) = &self.layout.categorical[k];
            let mut codes = Vec::with_capacity(rows);
            for r in 0..rows {
                let raw = f.data()[r * c_f + k];
                if !(raw >= 0.0 && raw.fract() == 0.0 && (raw as usize) < *vocab) {
                    return Err(Error::UnknownCategory { field: field.clone(), code: raw, vocab: *vocab });
                }
                codes.push(raw as usize);
            }
            let t = g.param(store, table);
            parts.push(g.embedding(t, &codes, &shape[..2])?);
        }
        let n_num = self.layout.numeric;
        if n_num > 0 {
            let c_t = self.layout.c_t();
            let numeric: Vec<f64> = (0..rows).flat_map(|r| f.data()[r * c_f + c_t..(r + 1) * c_f].iter().copied()).collect();
            parts.push(g.constant(Tensor::new(&[shape[0], shape[1], n_num], numeric)?));
        }
        Ok(g.concat_last(&parts)?)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: &Tensor) -> Result<Var> {
        let e = self.embed(g, store, f)?;
        let m = self.mlp1.forward(g, store, e)?;
        Ok(self.trunk.forward(g, store, m)?)
    }
}

/// Encodes a true future window `b×L×c` into `V_T: b×L`.
#[derive(Debug, Clone)]
pub struct TargetEncoder {
    pub mlp1: Linear,
    pub trunk: EncoderTrunk,
}

impl TargetEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, channels: usize, horizon: usize, hidden: usize) -> Result<Self, TensorError> {
        Ok(Self {
            mlp1: Linear::new(store, rng, &format!("{prefix}.mlp1"), channels, hidden, true)?,
            trunk: EncoderTrunk::new(store, rng, prefix, horizon, hidden)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Result<Var, TensorError> {
        let m = self.mlp1.forward(g, store, y)?;
        self.trunk.forward(g, store, m)
    }
}

/// `e^t · cos(V_T[i], V_C[j])` with `e^t` clamped to [`LOGIT_SCALE_MAX`].
/// Rows index targets, columns index covariates.
pub fn contrastive_logits(g: &mut Graph, v_t: Var, v_c: Var, log_temp: Var) -> Result<Var, TensorError> {
    let nt = g.normalize_rows(v_t)?;
    let nc = g.normalize_rows(v_c)?;
    let nct = g.transpose_last2(nc)?;
    let sim = g.matmul(nt, nct)?;
    let scale = g.exp(log_temp);
    let scale = g.clamp_max(scale, LOGIT_SCALE_MAX);
    g.mul(sim, scale)
}

/// Mean of the row-wise and column-wise cross-entropies with diagonal labels.
pub fn sce_loss(g: &mut Graph, logits: Var) -> Result<Var, TensorError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(TensorError::ShapeMismatch { op: "sce_loss", lhs: shape, rhs: Vec::new() });
    }
    let labels: Vec<usize> = (0..shape[0]).collect();
    let rows = g.cross_entropy(logits, &labels)?;
    let lt = g.transpose_last2(logits)?;
    let cols = g.cross_entropy(lt, &labels)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

/// Fraction of rows whose largest logit sits on the diagonal.
pub fn diagonal_top1(logits: &Tensor) -> f64 {
    let b = logits.dim(0);
    let hits = (0..b)
        .filter(|&i| {
            let row = &logits.data()[i * b..(i + 1) * b];
            row.iter().enumerate().all(|(j, &v)| j == i || v < row[i])
        })
        .count();
    hits as f64 / b as f64
}

/// Writes a square logits matrix as plain CSV, one target row per line.
pub fn write_logits_csv(path: &Path, logits: &Tensor) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let cols = logits.dim(1);
    for row in logits.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()
}

/// Both encoders plus the learnable log temperature.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub covariate: CovariateEncoder,
    pub target: TargetEncoder,
    pub log_temp: ParamId,
}

/// Loss and logits of one contrastive step.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveOutput {
    pub loss: Var,
    pub logits: Var,
}

impl DualEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, layout: &CovariateLayout, channels: usize, horizon: usize, hidden: usize) -> Result<Self, TensorError> {
        Ok(Self {
            covariate: CovariateEncoder::new(store, rng, "cov", layout, horizon, hidden)?,
            target: TargetEncoder::new(store, rng, "tgt", channels, horizon, hidden)?,
            log_temp: store.add("temperature", Tensor::scalar(initial_log_temperature()))?,
        })
    }

    /// Builds `L_sce` for a batch of future covariates `f: b×L×c_f` and true
    /// futures `y: b×L×c`.
    pub fn contrastive(&self, g: &mut Graph, store: &ParamStore, f: &Tensor, y: &Tensor) -> Result<ContrastiveOutput> {
        let v_c = self.covariate.forward(g, store, f)?;
        let yv = g.constant(y.clone());
        let v_t = self.target.forward(g, store, yv)?;
        let t = g.param(store, self.log_temp);
        let logits = contrastive_logits(g, v_t, v_c, t)?;
        let loss = sce_loss(g, logits)?;
        Ok(ContrastiveOutput { loss, logits })
    }
}

/// Expands `V_C: b×L` to `b×L×c`: an optional `L → L` mix across the
/// horizon, then one weight and bias per channel.
#[derive(Debug, Clone)]
pub struct VectorMap {
    pub mix: Option<Linear>,
    pub linear: Linear,
}

impl VectorMap {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, horizon: Option<usize>, channels: usize) -> Result<Self, TensorError> {
        let mix = horizon.map(|l| Linear::new(store, rng, &format!("{prefix}.mix"), l, l, true)).transpose()?;
        Ok(Self { mix, linear: Linear::new(store, rng, prefix, 1, channels, true)? })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v_c: Var) -> Result<Var, TensorError> {
        let s = g.shape(v_c).to_vec();
        if s.len() != 2 {
            return Err(TensorError::RankTooLow { op: "vector_map", rank: s.len(), needed: 2 });
        }
        let v = match &self.mix {
            Some(mix) => mix.forward(g, store, v_c)?,
            None => v_c,
        };
        let col = g.reshape(v, &[s[0], s[1], 1])?;
        self.linear.forward(g, store, col)
    }
}

/// `Ŷ = Ŷ_base + VectorMap(V_C)`.
pub fn fuse_prediction(g: &mut Graph, store: &ParamStore, y_base: Var, v_c: Var, map: &VectorMap) -> Result<Var, TensorError> {
    let delta = map.forward(g, store, v_c)?;
    g.add(y_base, delta)
}
