//! Append-only tape of tensor operations with reverse-mode differentiation.
//!
//! Node ids are handed out in insertion order, which is also a valid
//! topological order: every op only refers to ids that already exist. The
//! backward sweep therefore walks the tape once, back to front.

use std::cell::Cell;
use std::fmt;

use rand::Rng as _;

use super::tensor::{strides, MatmulPlan};
use super::{rng_for, ParamId, ParamStore, Rng, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Matmul,
    Permute,
    Reshape,
    Narrow,
    Expand,
    Concat,
    Softmax,
    Exp,
    ClampMax,
    Sum,
    Mean,
    Gelu,
    LayerNorm,
    NormalizeRows,
    Embedding,
    Dropout,
    SmoothL1,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Matmul,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Narrow,
        OpKind::Expand,
        OpKind::Concat,
        OpKind::Softmax,
        OpKind::Exp,
        OpKind::ClampMax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::NormalizeRows,
        OpKind::Embedding,
        OpKind::Dropout,
        OpKind::SmoothL1,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Matmul => "matmul",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Narrow => "narrow",
            OpKind::Expand => "expand",
            OpKind::Concat => "concat",
            OpKind::Softmax => "softmax",
            OpKind::Exp => "exp",
            OpKind::ClampMax => "clamp_max",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::NormalizeRows => "normalize_rows",
            OpKind::Embedding => "embedding",
            OpKind::Dropout => "dropout",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Corrupts the backward rule of `kind` on the current thread (or clears the
/// fault with `None`). Only meant for negative-control tests of the gradient
/// checker.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<OpKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Matmul { a: Var, b: Var, plan: MatmulPlan },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Narrow { x: Var, axis: usize, start: usize },
    Expand { x: Var, axis: usize },
    Concat { xs: Vec<Var>, widths: Vec<usize> },
    Softmax { x: Var },
    Exp { x: Var },
    ClampMax { x: Var, max: f64 },
    Sum { x: Var },
    Mean { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Embedding { table: Var, codes: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    SmoothL1 { pred: Var, target: Var, beta: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Expand { .. } => OpKind::Expand,
            Op::Concat { .. } => OpKind::Concat,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Exp { .. } => OpKind::Exp,
            Op::ClampMax { .. } => OpKind::ClampMax,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Computation tape for one forward (and optionally backward) pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    dropout_rng: Option<Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    /// Tape that records gradients; dropout is inactive.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, dropout_rng: None }
    }

    /// Tape for pure evaluation: parameters never require grad.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, dropout_rng: None }
    }

    /// Tape for a training step with dropout drawn from a seeded stream.
    pub fn training(seed: u64, step: u64) -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, dropout_rng: Some(rng_for(seed, step)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false, None)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push_leaf(t, rg, None)
    }

    /// Places a stored parameter on the tape. Frozen parameters enter as
    /// constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let rg = self.grad_enabled && store.is_trainable(id);
        self.push_leaf(store.get(id).clone(), rg, Some(id))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node { op, value, requires_grad: rg, param: None });
        Var(self.nodes.len() - 1)
    }

    // ---- element-wise ----

    /// `a + b` where `b`'s shape equals `a`'s or is a trailing suffix of it
    /// (repeated over the leading dims).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.suffix_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.suffix_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub { a, b }, out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.suffix_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, out, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, out, &[x])
    }

    fn suffix_binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.shape().ends_with(tb.shape()) {
            return Err(TensorError::ShapeMismatch { op, lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let bd = tb.data();
        let n = bd.len();
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(bd) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(Op::Exp { x }, out, &[x])
    }

    /// `min(x, max)`; the gradient is blocked where the clamp is active.
    pub fn clamp_max(&mut self, x: Var, max: f64) -> Var {
        let out = self.value(x).map(|v| v.min(max));
        self.push(Op::ClampMax { x, max }, out, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(Op::Gelu { x }, out, &[x])
    }

    /// Inverted dropout. Identity unless the tape was built with
    /// [`Graph::training`] and `p > 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(Op::Dropout { x, mask }, out, &[x])
    }

    // ---- linear algebra / layout ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(&plan.out_shape, out)?;
        Ok(self.push(Op::Matmul { a, b, plan }, t, &[a, b]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).permute(axes)?;
        Ok(self.push(Op::Permute { x, axes: axes.to_vec() }, out, &[x]))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var, TensorError> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::RankTooLow { op: "transpose", rank, needed: 2 });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, out, &[x]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(TensorError::BadAxes { shape: shape.to_vec(), axes: vec![axis] });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::IndexOutOfRange { index: start + len, size: shape[axis] });
        }
        let (outer, dim, inner) = split_at_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(Op::Narrow { x, axis, start }, out, &[x]))
    }

    /// Repeats a size-1 `axis` `times` times.
    pub fn expand(&mut self, x: Var, axis: usize, times: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() || shape[axis] != 1 || times == 0 {
            return Err(TensorError::BadAxes { shape: shape.to_vec(), axes: vec![axis] });
        }
        let (outer, _, inner) = split_at_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            let row = &t.data()[o * inner..(o + 1) * inner];
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = times;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(Op::Expand { x, axis }, out, &[x]))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or(TensorError::RankTooLow { op: "concat", rank: 0, needed: 1 })?;
        let lead = {
            let s = self.shape(first);
            if s.is_empty() {
                return Err(TensorError::RankTooLow { op: "concat", rank: 0, needed: 1 });
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: self.shape(first).to_vec(), rhs: s.to_vec() });
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(Op::Concat { xs: xs.to_vec(), widths }, out, xs))
    }

    /// Row lookup: `codes` index rows of `table [V, d]`; output shape is
    /// `code_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, codes: &[usize], code_shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::RankTooLow { op: "embedding", rank: t.rank(), needed: 2 });
        }
        let (vocab, d) = (t.dim(0), t.dim(1));
        if code_shape.iter().product::<usize>() != codes.len() {
            return Err(TensorError::LengthMismatch { shape: code_shape.to_vec(), len: codes.len() });
        }
        let mut data = Vec::with_capacity(codes.len() * d);
        for &c in codes {
            if c >= vocab {
                return Err(TensorError::IndexOutOfRange { index: c, size: vocab });
            }
            data.extend_from_slice(&t.data()[c * d..(c + 1) * d]);
        }
        let mut shape = code_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(Op::Embedding { table, codes: codes.to_vec() }, out, &[table]))
    }

    // ---- normalizations ----

    /// Numerically stable softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(TensorError::RankTooLow { op: "softmax", rank: 0, needed: 1 });
        }
        let w = t.dim(t.rank() - 1);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(w) {
            softmax_in_place(row);
        }
        Ok(self.push(Op::Softmax { x }, out, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(TensorError::RankTooLow { op: "layer_norm", rank: 0, needed: 1 });
        }
        let w = t.dim(t.rank() - 1);
        for p in [gamma, beta] {
            if self.shape(p) != [w] {
                return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: t.shape().to_vec(), rhs: self.shape(p).to_vec() });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(t.numel() / w);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, out, &[x, gamma, beta]))
    }

    /// Scales each last-axis row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(TensorError::RankTooLow { op: "normalize_rows", rank: 0, needed: 1 });
        }
        let w = t.dim(t.rank() - 1);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.numel() / w);
        for (row_idx, row) in out.data_mut().chunks_mut(w).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(TensorError::DegenerateRow { row: row_idx, norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.push(Op::NormalizeRows { x, norms }, out, &[x]))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum { x }, out, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean { x }, out, &[x])
    }

    /// Mean Smooth-L1 between equally shaped `pred` and `target`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var, TensorError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch { op: "smooth_l1", lhs: p.shape().to_vec(), rhs: t.shape().to_vec() });
        }
        let total: f64 = p.data().iter().zip(t.data()).map(|(a, b)| smooth_l1_elem(a - b, beta)).sum();
        let out = Tensor::scalar(total / p.numel() as f64);
        Ok(self.push(Op::SmoothL1 { pred, target, beta }, out, &[pred, target]))
    }

    /// Mean over rows of `-log softmax(logits[r])[labels[r]]` for `logits [rows, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(logits);
        if t.rank() != 2 {
            return Err(TensorError::RankTooLow { op: "cross_entropy", rank: t.rank(), needed: 2 });
        }
        let (rows, classes) = (t.dim(0), t.dim(1));
        if labels.len() != rows {
            return Err(TensorError::LengthMismatch { shape: t.shape().to_vec(), len: labels.len() });
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            if label >= classes {
                return Err(TensorError::IndexOutOfRange { index: label, size: classes });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, out, &[logits]))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.rank() != 0 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let fault = BACKWARD_FAULT.with(Cell::get);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if fault == Some(node.op.kind()) {
                g = g.map(|v| v * 1.5 + 1e-3);
            }
            self.backward_node(node, &g, &mut grads);
        }
        // only leaves keep their gradient
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, params: self.nodes.iter().map(|n| n.param).collect() })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Add { .. }) { 1.0 } else { -1.0 };
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    let mut db = reduce_to_suffix(g, val(*b).shape());
                    if sign < 0.0 {
                        db.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                if rg(*a) {
                    let n = tb.numel();
                    let mut da = g.clone();
                    for chunk in da.data_mut().chunks_mut(n) {
                        chunk.iter_mut().zip(tb.data()).for_each(|(x, y)| *x *= y);
                    }
                    accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let prod = g.zip_map(ta, |x, y| x * y).expect("mul grad shape");
                    accumulate(grads, *b, reduce_to_suffix(&prod, tb.shape()));
                }
            }
            Op::Scale { x, factor } => accumulate(grads, *x, g.map(|v| v * factor)),
            Op::Matmul { a, b, plan } => {
                let (ta, tb) = (val(*a), val(*b));
                let mut da = rg(*a).then(|| vec![0.0; ta.numel()]);
                let mut db = rg(*b).then(|| vec![0.0; tb.numel()]);
                plan.backward(ta.data(), tb.data(), g.data(), da.as_deref_mut(), db.as_deref_mut());
                if let Some(d) = da {
                    accumulate(grads, *a, Tensor::new(ta.shape(), d).expect("matmul da"));
                }
                if let Some(d) = db {
                    accumulate(grads, *b, Tensor::new(tb.shape(), d).expect("matmul db"));
                }
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                accumulate(grads, *x, g.permute(&inv).expect("inverse permute"));
            }
            Op::Reshape { x } => accumulate(grads, *x, g.reshape(val(*x).shape()).expect("reshape back")),
            Op::Narrow { x, axis, start } => {
                let shape = val(*x).shape();
                let (outer, dim, inner) = split_at_axis(shape, *axis);
                let len = g.dim(*axis);
                let mut dx = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Expand { x, axis } => {
                let shape = val(*x).shape();
                let (outer, _, inner) = split_at_axis(shape, *axis);
                let times = g.dim(*axis);
                let mut dx = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = &mut dx.data_mut()[o * inner..(o + 1) * inner];
                    for r in 0..times {
                        let src = &g.data()[(o * times + r) * inner..(o * times + r + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { xs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.numel() / total;
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    if rg(x) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, x, Tensor::new(val(x).shape(), d).expect("concat grad"));
                    }
                    offset += w;
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let w = y.dim(y.rank() - 1);
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    drow.iter_mut().zip(yrow).for_each(|(d, &yv)| *d = yv * (*d - dot));
                }
                accumulate(grads, *x, dx);
            }
            Op::Exp { x } => accumulate(grads, *x, g.zip_map(&node.value, |a, b| a * b).expect("exp grad")),
            Op::ClampMax { x, max } => {
                let dx = g.zip_map(val(*x), |gv, xv| if xv < *max { gv } else { 0.0 }).expect("clamp grad");
                accumulate(grads, *x, dx);
            }
            Op::Sum { x } => accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean { x } => {
                let t = val(*x);
                accumulate(grads, *x, Tensor::full(t.shape(), g.item() / t.numel() as f64));
            }
            Op::Gelu { x } => {
                let dx = g
                    .zip_map(val(*x), |gv, v| {
                        let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * d
                    })
                    .expect("gelu grad");
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = val(*gamma).data();
                let w = gam.len();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![0.0; w];
                    let mut dbeta = vec![0.0; w];
                    for (grow, hrow) in g.data().chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            dg[j] += grow[j] * hrow[j];
                            dbeta[j] += grow[j];
                        }
                    }
                    if rg(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(&[w], dg).expect("ln gamma"));
                    }
                    if rg(*beta) {
                        accumulate(grads, *beta, Tensor::new(&[w], dbeta).expect("ln beta"));
                    }
                }
                if rg(*x) {
                    let mut dx = Vec::with_capacity(g.numel());
                    let nw = w as f64;
                    for ((grow, hrow), &inv) in g.data().chunks(w).zip(xhat.chunks(w)).zip(inv_std) {
                        let dh: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            dx.push(inv / nw * (nw * dh[j] - sum_dh - hrow[j] * sum_dh_h));
                        }
                    }
                    accumulate(grads, *x, Tensor::new(val(*x).shape(), dx).expect("ln dx"));
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let w = y.dim(y.rank() - 1);
                let mut dx = g.clone();
                for ((drow, yrow), &norm) in dx.data_mut().chunks_mut(w).zip(y.data().chunks(w)).zip(norms) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    drow.iter_mut().zip(yrow).for_each(|(d, &yv)| *d = (*d - yv * dot) / norm);
                }
                accumulate(grads, *x, dx);
            }
            Op::Embedding { table, codes } => {
                let t = val(*table);
                let d = t.dim(1);
                let mut dt = Tensor::zeros(t.shape());
                for (i, &c) in codes.iter().enumerate() {
                    let dst = &mut dt.data_mut()[c * d..(c + 1) * d];
                    dst.iter_mut().zip(&g.data()[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *table, dt);
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                accumulate(grads, *x, dx);
            }
            Op::SmoothL1 { pred, target, beta } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = g.item() / p.numel() as f64;
                let dp = p.zip_map(t, |a, b| scale * smooth_l1_slope(a - b, *beta)).expect("smooth l1 grad");
                if rg(*target) {
                    accumulate(grads, *target, dp.map(|v| -v));
                }
                if rg(*pred) {
                    accumulate(grads, *pred, dp);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let t = val(*logits);
                let (rows, classes) = (t.dim(0), t.dim(1));
                let scale = g.item() / rows as f64;
                let mut d = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * classes + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, Tensor::new(t.shape(), d).expect("ce grad"));
            }
        }
    }
}

pub(crate) fn smooth_l1_elem(diff: f64, beta: f64) -> f64 {
    let e = diff.abs();
    if e < beta {
        e * e / (2.0 * beta)
    } else {
        e - beta / 2.0
    }
}

fn smooth_l1_slope(diff: f64, beta: f64) -> f64 {
    if diff.abs() < beta {
        diff / beta
    } else {
        diff.signum()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = strides(shape)[axis];
    (outer, shape[axis], inner)
}

fn reduce_to_suffix(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let n = out.numel();
    for chunk in g.data().chunks(n) {
        out.data_mut().iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of leaf nodes produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` if it did not require grad or was unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter of `store`, in store order. Unreachable
    /// parameters receive zeros; a parameter placed on the tape more than once
    /// gets the sum of its uses.
    pub fn for_params(&self, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(id)) = (g, p) {
                match &mut out[id.0] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        store
            .ids()
            .zip(out)
            .map(|(id, g)| (id, g.unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))))
            .collect()
    }

    /// Like [`Gradients::for_params`] but restricted to trainable entries.
    pub fn for_trainable(&self, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        self.for_params(store).into_iter().filter(|(id, _)| store.is_trainable(*id)).collect()
    }
}
