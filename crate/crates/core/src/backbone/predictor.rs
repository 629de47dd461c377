use super::layers::{FeedForward, LayerNorm, Linear, SelfAttention};
use super::BackboneConfig;
use crate::numcore::{init, Graph, ParamId, ParamStore, Rng, TensorError, Var};

/// Subtracts the last observed value of each channel. Returns the normalized
/// input `b×T×c` and the anchor `b×1×c`.
pub fn instance_normalize(g: &mut Graph, x: Var) -> Result<(Var, Var), TensorError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::RankTooLow { op: "instance_normalize", rank: shape.len(), needed: 3 });
    }
    let t = shape[1];
    let anchor = g.narrow(x, 1, t - 1, 1)?;
    let tiled = g.expand(anchor, 1, t)?;
    Ok((g.sub(x, tiled)?, anchor))
}

/// Re-adds the anchor over every horizon step.
pub fn instance_denormalize(g: &mut Graph, y: Var, anchor: Var) -> Result<Var, TensorError> {
    let horizon = g.shape(y)[1];
    let tiled = g.expand(anchor, 1, horizon)?;
    g.add(y, tiled)
}

/// `(b·c)×T` → `(b·c)×n×pl`.
pub fn patchify(g: &mut Graph, x: Var, patch_len: usize) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::RankTooLow { op: "patchify", rank: shape.len(), needed: 2 });
    }
    if patch_len == 0 || !shape[1].is_multiple_of(patch_len) {
        return Err(TensorError::NotDivisible { len: shape[1], by: patch_len });
    }
    g.reshape(x, &[shape[0], shape[1] / patch_len, patch_len])
}

/// Swaps the patch and intra-patch axes: row `i` of the result is the
/// subsequence of every patch's `i`-th point.
pub fn trend_view(g: &mut Graph, p: Var) -> Result<Var, TensorError> {
    g.permute(p, &[0, 2, 1])
}

/// Attention across the `pl` trend sequences followed by the `pl → hd` mixer.
#[derive(Debug, Clone)]
pub struct CrossPatch {
    pub ln: Option<LayerNorm>,
    pub attn: SelfAttention,
    pub mixer: Linear,
}

impl CrossPatch {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p: Var, dropout: f64) -> Result<Var, TensorError> {
        let t = trend_view(g, p)?;
        let t_in = match &self.ln {
            Some(ln) => ln.forward(g, store, t)?,
            None => t,
        };
        let a = self.attn.forward(g, store, t_in)?;
        let a = g.dropout(a, dropout);
        let back = trend_view(g, a)?;
        let r = g.add(back, p)?;
        let out = self.mixer.forward(g, store, r)?;
        Ok(g.dropout(out, dropout))
    }
}

/// Patch embedding followed by attention across the `n` patch tokens.
#[derive(Debug, Clone)]
pub struct InterPatch {
    pub embed: Linear,
    pub pos: Option<ParamId>,
    pub ln: Option<LayerNorm>,
    pub attn: SelfAttention,
}

impl InterPatch {
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, p: Var) -> Result<Var, TensorError> {
        let e = self.embed.forward(g, store, p)?;
        match self.pos {
            Some(pos) => {
                let pos = g.param(store, pos);
                g.add(e, pos)
            }
            None => Ok(e),
        }
    }

    pub fn attend(&self, g: &mut Graph, store: &ParamStore, e: Var, dropout: f64) -> Result<Var, TensorError> {
        let e_in = match &self.ln {
            Some(ln) => ln.forward(g, store, e)?,
            None => e,
        };
        let out = self.attn.forward(g, store, e_in)?;
        Ok(g.dropout(out, dropout))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p: Var, dropout: f64) -> Result<Var, TensorError> {
        let e = self.embed(g, store, p)?;
        self.attend(g, store, e, dropout)
    }
}

/// Residual patch attention used for blocks beyond the first.
#[derive(Debug, Clone)]
pub struct ExtraBlock {
    pub ln: Option<LayerNorm>,
    pub attn: SelfAttention,
    pub ffn: Option<FeedForward>,
}

#[derive(Debug, Clone)]
pub struct BasePredictor {
    pub config: BackboneConfig,
    pub cross: CrossPatch,
    pub inter: InterPatch,
    pub ffn: Option<FeedForward>,
    pub extra: Vec<ExtraBlock>,
    /// n → nt on the patch axis.
    pub head_a: Linear,
    /// hd → pl on the feature axis.
    pub head_b: Linear,
}

impl BasePredictor {
    /// Registers all parameters under `prefix.` in `store`. The config must
    /// already be validated.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, config: &BackboneConfig, prefix: &str) -> Result<Self, TensorError> {
        let (n, pl, hd) = (config.n_patches(), config.patch_len, config.hidden);
        let name = |s: &str| format!("{prefix}.{s}");
        let cross = CrossPatch {
            ln: config.use_ln.then(|| LayerNorm::new(store, &name("cross.ln"), n)).transpose()?,
            attn: SelfAttention::new(store, rng, &name("cross.attn"), n, config.cross_heads)?,
            mixer: Linear::new(store, rng, &name("cross.mixer"), pl, hd, true)?,
        };
        let embed = Linear::new(store, rng, &name("inter.embed"), pl, hd, true)?;
        let pos = if config.use_pe { Some(store.add(name("inter.pos"), init::normal(rng, &[n, hd], 0.02))?) } else { None };
        let inter = InterPatch {
            embed,
            pos,
            ln: config.use_ln.then(|| LayerNorm::new(store, &name("inter.ln"), hd)).transpose()?,
            attn: SelfAttention::new(store, rng, &name("inter.attn"), hd, config.heads)?,
        };
        let ffn = config.use_ffn.then(|| FeedForward::new(store, rng, &name("ffn"), hd)).transpose()?;
        let mut extra = Vec::new();
        for k in 1..config.depth {
            extra.push(ExtraBlock {
                ln: config.use_ln.then(|| LayerNorm::new(store, &name(&format!("block{k}.ln")), hd)).transpose()?,
                attn: SelfAttention::new(store, rng, &name(&format!("block{k}.attn")), hd, config.heads)?,
                ffn: config.use_ffn.then(|| FeedForward::new(store, rng, &name(&format!("block{k}.ffn")), hd)).transpose()?,
            });
        }
        let head_a = Linear::new(store, rng, &name("head_a"), n, config.n_target_patches(), true)?;
        let head_b = Linear::new(store, rng, &name("head_b"), hd, pl, true)?;
        Ok(Self { config: config.clone(), cross, inter, ffn, extra, head_a, head_b })
    }

    /// Patch-level hidden states `(b·c)×n×hd` from patches `(b·c)×n×pl`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, p: Var) -> Result<Var, TensorError> {
        let drop = self.config.dropout;
        let c = self.cross.forward(g, store, p, drop)?;
        let i = self.inter.forward(g, store, p, drop)?;
        let mut h = g.add(c, i)?;
        if let Some(ffn) = &self.ffn {
            h = ffn.forward(g, store, h)?;
        }
        for block in &self.extra {
            let h_in = match &block.ln {
                Some(ln) => ln.forward(g, store, h)?,
                None => h,
            };
            let a = block.attn.forward(g, store, h_in)?;
            let a = g.dropout(a, drop);
            h = g.add(h, a)?;
            if let Some(ffn) = &block.ffn {
                h = ffn.forward(g, store, h)?;
            }
        }
        Ok(h)
    }

    /// `(b·c)×n×hd` → `(b·c)×L`.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var, TensorError> {
        let rows = g.shape(h)[0];
        let t = g.transpose_last2(h)?;
        let a = self.head_a.forward(g, store, t)?;
        let a = g.transpose_last2(a)?;
        let b = self.head_b.forward(g, store, a)?;
        g.reshape(b, &[rows, self.config.horizon])
    }

    /// `b×T×c` → `b×L×c`. Dropout is active only on training graphs.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.config.seq_len {
            return Err(TensorError::ShapeMismatch { op: "base_forward", lhs: shape, rhs: vec![self.config.seq_len] });
        }
        let (b, c) = (shape[0], shape[2]);
        let (xn, anchor) = instance_normalize(g, x)?;
        let ci = g.permute(xn, &[0, 2, 1])?;
        let ci = g.reshape(ci, &[b * c, self.config.seq_len])?;
        let p = patchify(g, ci, self.config.patch_len)?;
        let h = self.encode(g, store, p)?;
        let y = self.head(g, store, h)?;
        let y = g.reshape(y, &[b, c, self.config.horizon])?;
        let y = g.permute(y, &[0, 2, 1])?;
        instance_denormalize(g, y, anchor)
    }
}
