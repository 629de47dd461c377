use super::{DataError, SeriesDataset, SplitKind};
use crate::numcore::Tensor;

/// One batch of aligned (input, target, future covariate) windows, z-scored
/// with train statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// b × T × c
    pub x: Tensor,
    /// b × L × c
    pub y: Tensor,
    /// b × L × c_f: categorical codes first, then scaled numerics.
    pub f: Option<Tensor>,
    /// Row index where each window's input starts.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Window start offsets inside one split range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowIndex {
    pub starts: Vec<usize>,
    pub seq_len: usize,
    pub horizon: usize,
}

impl WindowIndex {
    pub fn new(ds: &SeriesDataset, kind: SplitKind, seq_len: usize, horizon: usize, stride: usize) -> Result<Self, DataError> {
        let split = ds.split().ok_or(DataError::NoSplit)?;
        if seq_len == 0 || horizon == 0 || stride == 0 {
            return Err(DataError::BadWindow(format!("T={seq_len}, L={horizon}, stride={stride} must be positive")));
        }
        let range = split.range(kind);
        let span = seq_len + horizon;
        if span > range.len() {
            return Err(DataError::BadWindow(format!("T+L={span} exceeds the {kind} range of {} rows", range.len())));
        }
        let starts = (range.start..=range.end - span).step_by(stride).collect();
        Ok(Self { starts, seq_len, horizon })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Assembles the windows at the given positions of `starts`.
    pub fn batch(&self, ds: &SeriesDataset, positions: &[usize]) -> WindowBatch {
        let starts: Vec<usize> = positions.iter().map(|&p| self.starts[p]).collect();
        gather(ds, &starts, self.seq_len, self.horizon)
    }

    /// Consecutive batches of at most `batch_size` windows; the last may be short.
    pub fn batches<'a>(&'a self, ds: &'a SeriesDataset, batch_size: usize) -> impl Iterator<Item = WindowBatch> + 'a {
        let n = self.len();
        (0..n).step_by(batch_size.max(1)).map(move |s| {
            let positions: Vec<usize> = (s..(s + batch_size).min(n)).collect();
            self.batch(ds, &positions)
        })
    }
}

fn gather(ds: &SeriesDataset, starts: &[usize], seq_len: usize, horizon: usize) -> WindowBatch {
    let c = ds.num_channels();
    let b = starts.len();
    let mut x = Vec::with_capacity(b * seq_len * c);
    let mut y = Vec::with_capacity(b * horizon * c);
    for &s in starts {
        for r in s..s + seq_len {
            x.extend((0..c).map(|ch| ds.scaled(r, ch)));
        }
        for r in s + seq_len..s + seq_len + horizon {
            y.extend((0..c).map(|ch| ds.scaled(r, ch)));
        }
    }
    let f = ds.covariates().map(|cov| {
        let c_f = cov.c_f();
        let mut data = vec![0.0; b * horizon * c_f];
        for (i, &s) in starts.iter().enumerate() {
            for k in 0..horizon {
                let off = (i * horizon + k) * c_f;
                cov.write_row(s + seq_len + k, &mut data[off..off + c_f]);
            }
        }
        Tensor::new(&[b, horizon, c_f], data).expect("covariate window shape")
    });
    WindowBatch {
        x: Tensor::new(&[b, seq_len, c], x).expect("input window shape"),
        y: Tensor::new(&[b, horizon, c], y).expect("target window shape"),
        f,
        starts: starts.to_vec(),
    }
}

/// All windows of one split in chronological order, grouped into batches of
/// `batch_size` (the final batch keeps the remainder).
pub fn make_windows(
    ds: &SeriesDataset,
    kind: SplitKind,
    seq_len: usize,
    horizon: usize,
    stride: usize,
    batch_size: usize,
) -> Result<Vec<WindowBatch>, DataError> {
    let index = WindowIndex::new(ds, kind, seq_len, horizon, stride)?;
    Ok(index.batches(ds, batch_size).collect())
}
