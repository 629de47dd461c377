use std::fmt;

use rayon::prelude::*;

use super::TensorError;

/// Dense row-major array of `f64` values.
///
/// A rank-0 tensor (empty shape) is a scalar holding exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let shown = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, "Tensor{:?} {:?}", self.shape, shown)?;
        if self.data.len() > PREVIEW {
            write!(f, "...")?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::EmptyDim(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 (or single element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = flat_index(&self.shape, index);
        self.data[i] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self, TensorError> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::BadAxes { shape: self.shape.clone(), axes: axes.to_vec() });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            // odometer increment over the output index
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += perm_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= perm_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&self) -> Result<Self, TensorError> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::RankTooLow { op: "transpose", rank, needed: 2 });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Batched matrix product with leading-dimension repetition.
    ///
    /// `self` is `[..., m, k]`, `rhs` is `[..., k, p]`. Leading dims must be equal,
    /// or one side has none and is repeated across the other.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        let plan = MatmulPlan::new(self.shape(), rhs.shape())?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(&self.data, &rhs.data, &mut out);
        Ok(Self { shape: plan.out_shape.clone(), data: out })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut flat = 0;
    for (&d, &i) in shape.iter().zip(index) {
        assert!(i < d, "index {index:?} out of bounds for shape {shape:?}");
        flat = flat * d + i;
    }
    flat
}

/// Minimum multiply-adds before a GEMM is split across the rayon pool.
const PAR_THRESHOLD: usize = 1 << 15;

/// Row-major GEMM variants. Every output element is produced by the same
/// sequential reduction regardless of how rows are split across threads, so
/// results are bit-identical for any thread count.
pub(crate) mod gemm {
    use super::*;

    /// c[m,p] += a[m,k] · b[k,p]
    pub fn nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
        let row = |(i, crow): (usize, &mut [f64])| {
            let arow = &a[i * k..(i + 1) * k];
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * p..(l + 1) * p];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        };
        if m * k * p >= PAR_THRESHOLD && m > 1 {
            c.par_chunks_mut(p).enumerate().for_each(row);
        } else {
            c.chunks_mut(p).enumerate().for_each(row);
        }
        debug_assert_eq!(c.len(), m * p);
    }

    /// c[m,p] += a[m,k] · b[p,k]ᵀ
    pub fn nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
        let row = |(i, crow): (usize, &mut [f64])| {
            let arow = &a[i * k..(i + 1) * k];
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                *cv += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        };
        if m * k * p >= PAR_THRESHOLD && m > 1 {
            c.par_chunks_mut(p).enumerate().for_each(row);
        } else {
            c.chunks_mut(p).enumerate().for_each(row);
        }
        debug_assert_eq!(c.len(), m * p);
    }

    /// c[k,p] += a[m,k]ᵀ · b[m,p]
    pub fn tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
        let row = |(i, crow): (usize, &mut [f64])| {
            for l in 0..m {
                let av = a[l * k + i];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * p..(l + 1) * p];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        };
        if m * k * p >= PAR_THRESHOLD && k > 1 {
            c.par_chunks_mut(p).enumerate().for_each(row);
        } else {
            c.chunks_mut(p).enumerate().for_each(row);
        }
        debug_assert_eq!(c.len(), k * p);
    }
}

/// How leading dims of a batched matmul line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Leading {
    /// Both operands carry the same leading dims.
    Paired,
    /// Only the lhs has leading dims; rhs is one matrix reused.
    RhsShared,
    /// Only the rhs has leading dims; lhs is one matrix reused.
    LhsShared,
}

#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub leading: Leading,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self, TensorError> {
        if a.len() < 2 || b.len() < 2 {
            return Err(TensorError::RankTooLow { op: "matmul", rank: a.len().min(b.len()), needed: 2 });
        }
        let (alead, am) = a.split_at(a.len() - 2);
        let (blead, bm) = b.split_at(b.len() - 2);
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
        if am[1] != bm[0] {
            return Err(mismatch());
        }
        let leading = match (alead.is_empty(), blead.is_empty()) {
            (_, true) => Leading::RhsShared,
            (true, false) => Leading::LhsShared,
            (false, false) if alead == blead => Leading::Paired,
            _ => return Err(mismatch()),
        };
        let lead = if blead.is_empty() { alead } else { blead };
        let mut out_shape = lead.to_vec();
        out_shape.extend([am[0], bm[1]]);
        Ok(Self { batch: lead.iter().product(), m: am[0], k: am[1], p: bm[1], leading, out_shape })
    }

    pub fn out_numel(&self) -> usize {
        self.batch * self.m * self.p
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, p) = (self.m, self.k, self.p);
        match self.leading {
            // one tall GEMM over the flattened batch
            Leading::RhsShared => gemm::nn(a, b, out, self.batch * m, k, p),
            Leading::Paired => {
                let f = |(i, o): (usize, &mut [f64])| {
                    gemm::nn(&a[i * m * k..(i + 1) * m * k], &b[i * k * p..(i + 1) * k * p], o, m, k, p)
                };
                if self.batch > 1 && self.out_numel() * k >= PAR_THRESHOLD {
                    out.par_chunks_mut(m * p).enumerate().for_each(f);
                } else {
                    out.chunks_mut(m * p).enumerate().for_each(f);
                }
            }
            Leading::LhsShared => {
                for (i, o) in out.chunks_mut(m * p).enumerate() {
                    gemm::nn(a, &b[i * k * p..(i + 1) * k * p], o, m, k, p);
                }
            }
        }
    }

    /// Accumulates dA and dB given dC.
    pub fn backward(&self, a: &[f64], b: &[f64], dc: &[f64], da: Option<&mut [f64]>, db: Option<&mut [f64]>) {
        let (m, k, p) = (self.m, self.k, self.p);
        match self.leading {
            Leading::RhsShared => {
                let rows = self.batch * m;
                if let Some(da) = da {
                    gemm::nt(dc, b, da, rows, p, k);
                }
                if let Some(db) = db {
                    gemm::tn(a, dc, db, rows, k, p);
                }
            }
            Leading::Paired => {
                if let Some(da) = da {
                    da.par_chunks_mut(m * k).enumerate().for_each(|(i, d)| {
                        gemm::nt(&dc[i * m * p..(i + 1) * m * p], &b[i * k * p..(i + 1) * k * p], d, m, p, k)
                    });
                }
                if let Some(db) = db {
                    db.par_chunks_mut(k * p).enumerate().for_each(|(i, d)| {
                        gemm::tn(&a[i * m * k..(i + 1) * m * k], &dc[i * m * p..(i + 1) * m * p], d, m, k, p)
                    });
                }
            }
            Leading::LhsShared => {
                // shared lhs: dA reduces over the batch in order
                if let Some(da) = da {
                    for i in 0..self.batch {
                        gemm::nt(&dc[i * m * p..(i + 1) * m * p], &b[i * k * p..(i + 1) * k * p], da, m, p, k);
                    }
                }
                if let Some(db) = db {
                    for i in 0..self.batch {
                        gemm::tn(a, &dc[i * m * p..(i + 1) * m * p], &mut db[i * k * p..(i + 1) * k * p], m, k, p);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_zero_dims() {
        assert!(matches!(Tensor::new(&[2, 2], vec![1.0; 3]), Err(TensorError::LengthMismatch { .. })));
        assert!(matches!(Tensor::new(&[2, 0], vec![]), Err(TensorError::EmptyDim(_))));
        let s = Tensor::new(&[], vec![4.0]).unwrap();
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item(), 4.0);
    }

    #[test]
    fn identity_and_dot_products() {
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);
        let row = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let col = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
        let a = Tensor::zeros(&[4, 2, 3]);
        let b = Tensor::zeros(&[5, 3, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.get(&[c, a, b]), x.get(&[a, b, c]));
                }
            }
        }
        assert!(x.permute(&[0, 0, 1]).is_err());
    }
}
