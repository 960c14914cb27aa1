//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "REPCOUNT"
//! version  u32
//! meta     u64 length, then UTF-8 JSON
//! count    u32
//! tensor   u32 name length, name, u32 rank, u64 per dim, f64 values
//! ```
//!
//! Metadata keys are emitted in sorted order and nothing time-dependent is
//! written, so equal models produce equal files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::nn::ParamSet;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"REPCOUNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new<M: Serialize>(metadata: &M) -> Result<Self> {
        let metadata = serde_json::to_value(metadata).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        Ok(Checkpoint { metadata, tensors: Vec::new() })
    }

    pub fn metadata<M: DeserializeOwned>(&self) -> Result<M> {
        M::deserialize(&self.metadata).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
    }

    /// Appends every tensor of `params`, names prefixed with `prefix.`.
    pub fn add_params<P: ParamSet>(&mut self, prefix: &str, params: &P) {
        for t in params.tensors() {
            self.tensors.push(Tensor { name: format!("{prefix}.{}", t.name), shape: t.shape, data: t.data.to_vec() });
        }
    }

    /// Overwrites `params` with the stored tensors under `prefix`. Names,
    /// order, and shapes must match exactly.
    pub fn load_params<P: ParamSet>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let dot = format!("{prefix}.");
        let stored: Vec<&Tensor> = self.tensors.iter().filter(|t| t.name.starts_with(&dot)).collect();
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|t| (format!("{dot}{}", t.name), t.shape)).collect();
        if stored.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "`{prefix}` has {} tensors, model expects {}",
                stored.len(),
                expected.len()
            )));
        }
        for (s, (name, shape)) in stored.iter().zip(&expected) {
            if &s.name != name || &s.shape != shape {
                return Err(Error::Checkpoint(format!("expected {name} {shape:?}, found {} {:?}", s.name, s.shape)));
            }
        }
        for (dst, s) in params.tensors_mut().into_iter().zip(stored) {
            dst.copy_from_slice(&s.data);
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let dot = format!("{prefix}.");
        self.tensors.iter().any(|t| t.name.starts_with(&dot))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialize");
        let mut out = Vec::with_capacity(32 + meta.len() + self.tensors.iter().map(|t| 8 * t.data.len() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpn::{Dpn, DpnConfig};
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(&json!({ "stage": 2, "loss": [0.5, 0.25] })).unwrap();
        ck.add_params("dpn", &Dpn::new(DpnConfig::default()).params);
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn params_restore() {
        let ck = sample();
        let mut other = Dpn::new(DpnConfig { seed: 99, ..DpnConfig::default() });
        assert_ne!(other.params, Dpn::new(DpnConfig::default()).params);
        ck.load_params("dpn", &mut other.params).unwrap();
        assert_eq!(other.params, Dpn::new(DpnConfig::default()).params);
        assert!(ck.load_params("rpn", &mut other.params).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ck = sample();
        let mut narrow = Dpn::new(DpnConfig { channels: [8, 8, 8, 8], ..DpnConfig::default() });
        assert!(matches!(ck.load_params("dpn", &mut narrow.params), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(Checkpoint::from_bytes(&bad_version).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
    }
}
