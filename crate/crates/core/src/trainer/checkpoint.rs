//! Binary tensor archive: `LIPF`, version, entry count, entries, payload length.

use std::path::Path;

use thiserror::Error;

use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"LIPF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint entry: {0}")]
    CorruptEntry(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    /// Values as loaded; entries stored as f32 hold the widened values.
    pub tensor: Tensor,
}

/// Ordered named tensors. Order is preserved through save and load.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: Dtype, tensor: Tensor) {
        self.entries.push(Entry { name: name.into(), dtype, tensor });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dtype as u8);
            out.push(e.tensor.rank() as u8);
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                match e.dtype {
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let payload = out.len() as u64;
        out.extend_from_slice(&payload.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CheckpointError::CorruptEntry(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let dtype = match r.u8("dtype")? {
                0 => Dtype::F32,
                1 => Dtype::F64,
                d => return Err(CheckpointError::CorruptEntry(format!("{name}: unknown dtype {d}"))),
            };
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64("dim")?).map_err(|_| CheckpointError::CorruptEntry(format!("{name}: dim overflow")))?);
            }
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let nbytes = numel.and_then(|n| n.checked_mul(dtype.width()));
            let Some(nbytes) = nbytes else {
                return Err(CheckpointError::CorruptEntry(format!("{name}: size overflow")));
            };
            let raw = r.take(nbytes, &name)?;
            let data: Vec<f64> = match dtype {
                Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            let tensor = Tensor::new(&shape, data).map_err(|e| CheckpointError::CorruptEntry(format!("{name}: {e}")))?;
            entries.push(Entry { name, dtype, tensor });
        }
        let payload = r.pos as u64;
        let trailer = r.u64("payload length")?;
        if trailer != payload {
            return Err(CheckpointError::CorruptEntry(format!("payload length {trailer} does not match {payload}")));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::CorruptEntry(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::CorruptEntry(format!("truncated while reading {what}")));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{init, rng_for};
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut rng = rng_for(0, 0);
        let mut c = Checkpoint::new();
        c.push("a.weight", Dtype::F64, init::normal(&mut rng, &[3, 2], 1.0));
        c.push("temperature", Dtype::F64, Tensor::scalar(2.5));
        c.push("b", Dtype::F32, init::normal(&mut rng, &[4], 1.0));
        c
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"LIPF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 8);
        assert_eq!(&bytes[14..22], b"a.weight");
        let n = bytes.len();
        assert_eq!(u64::from_le_bytes(bytes[n - 8..].try_into().unwrap()), (n - 8) as u64);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1.ckpt"), dir.path().join("2.ckpt"));
        let c = sample();
        c.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded.get("a.weight"), c.get("a.weight"));
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn f32_storage_rounds_within_bound() {
        let original = sample();
        let loaded = Checkpoint::from_bytes(&original.to_bytes()).unwrap();
        let (a, b) = (original.get("b").unwrap(), loaded.get("b").unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn every_truncation_is_detected() {
        let bytes = sample().to_bytes();
        for cut in 4..bytes.len() {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::CorruptEntry(_))), "cut {cut}");
        }
    }

    #[test]
    fn magic_and_version() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"LIP"), Err(CheckpointError::BadMagic)));
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::VersionMismatch { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    proptest! {
        #[test]
        fn f64_values_round_trip_exactly(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut c = Checkpoint::new();
            c.push("x", Dtype::F64, Tensor::new(&[vals.len()], vals.clone()).unwrap());
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.get("x").unwrap().data(), &vals[..]);
        }
    }
}
