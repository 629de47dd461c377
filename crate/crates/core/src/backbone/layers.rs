//! Parameterized building blocks shared by the predictor and the encoders.

use crate::numcore::{init, Graph, ParamId, ParamStore, Rng, Tensor, TensorError, Var};

/// Affine map over the last axis, weight stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_features: usize, out_features: usize, bias: bool) -> Result<Self, TensorError> {
        let weight = store.add(format!("{name}.weight"), init::fan_in_uniform(rng, &[in_features, out_features], in_features))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]))?) } else { None };
        Ok(Self { weight, bias, in_features, out_features })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }
    }
}

/// Multi-head scaled dot-product self-attention without biases or output
/// projection: heads are concatenated back to the input width.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub heads: usize,
    pub width: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, width: usize, heads: usize) -> Result<Self, TensorError> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(TensorError::NotDivisible { len: width, by: heads });
        }
        let mut mk = |suffix: &str| store.add(format!("{name}.{suffix}"), init::fan_in_uniform(rng, &[width, width], width));
        let wq = mk("wq")?;
        let wk = mk("wk")?;
        let wv = mk("wv")?;
        Ok(Self { wq, wk, wv, heads, width })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn num_params(&self) -> usize {
        3 * self.width * self.width
    }

    /// `x: [N, tokens, width]` → `[N, tokens, width]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        self.forward_with_probs(g, store, x).map(|(out, _)| out)
    }

    /// Also returns the attention probabilities `[N, heads, tokens, tokens]`
    /// (`[N, tokens, tokens]` for a single head).
    pub fn forward_with_probs(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var), TensorError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(TensorError::ShapeMismatch { op: "attention", lhs: shape, rhs: vec![self.width] });
        }
        let (n, tokens) = (shape[0], shape[1]);
        let (wq, wk, wv) = (g.param(store, self.wq), g.param(store, self.wk), g.param(store, self.wv));
        let mut q = g.matmul(x, wq)?;
        let mut k = g.matmul(x, wk)?;
        let mut v = g.matmul(x, wv)?;
        let dk = self.head_dim();
        if self.heads > 1 {
            let split = |g: &mut Graph, t: Var| -> Result<Var, TensorError> {
                let r = g.reshape(t, &[n, tokens, self.heads, dk])?;
                g.permute(r, &[0, 2, 1, 3])
            };
            q = split(g, q)?;
            k = split(g, k)?;
            v = split(g, v)?;
        }
        let kt = g.transpose_last2(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let probs = g.softmax(scores)?;
        let mut out = g.matmul(probs, v)?;
        if self.heads > 1 {
            out = g.permute(out, &[0, 2, 1, 3])?;
            out = g.reshape(out, &[n, tokens, self.width])?;
        }
        Ok((out, probs))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self, TensorError> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[width]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[width]))?;
        Ok(Self { gamma, beta, width })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

/// Position-wise `width → 4·width → width` network with GELU, applied as a
/// residual.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, width: usize) -> Result<Self, TensorError> {
        let up = Linear::new(store, rng, &format!("{name}.up"), width, 4 * width, true)?;
        let down = Linear::new(store, rng, &format!("{name}.down"), 4 * width, width, true)?;
        Ok(Self { up, down })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = self.down.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng_for;

    fn set(store: &mut ParamStore, id: ParamId, data: &[f64]) {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::new(&shape, data.to_vec()).unwrap();
    }

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng_for(0, 0), "l", 48, 512, true).unwrap();
        assert_eq!(lin.num_params(), 25088);
        assert_eq!(store.trainable_elements(), 25088);
    }

    #[test]
    fn hand_computed_two_token_attention() {
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, &mut rng_for(0, 0), "a", 2, 1).unwrap();
        set(&mut store, attn.wq, &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, attn.wk, &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, attn.wv, &[2.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = attn.forward(&mut g, &store, x).unwrap();
        // Q = K = X = I, V = diag(2, 1); scores = I / sqrt(2)
        let s = 1.0 / 2f64.sqrt();
        let p_diag = s.exp() / (s.exp() + 1.0);
        let p_off = 1.0 - p_diag;
        let expected = [2.0 * p_diag, p_off, 2.0 * p_off, p_diag];
        for (a, b) in g.value(out).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, &mut rng_for(1, 0), "a", 4, 2).unwrap();
        let mut g = Graph::new();
        let xt = Tensor::from_fn(&[3, 1, 4], |i| (i as f64 * 0.37).sin());
        let x = g.constant(xt.clone());
        let out = attn.forward(&mut g, &store, x).unwrap();
        let expected = xt.matmul(store.get(attn.wv)).unwrap();
        for (a, b) in g.value(out).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        assert!(SelfAttention::new(&mut store, &mut rng_for(0, 0), "a", 6, 4).is_err());
    }

    #[test]
    fn ffn_param_count() {
        let mut store = ParamStore::new();
        FeedForward::new(&mut store, &mut rng_for(0, 0), "f", 16).unwrap();
        assert_eq!(store.trainable_elements(), 8 * 16 * 16 + 5 * 16);
    }
}
