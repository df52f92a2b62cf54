//! Binary weight files.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "CCYD" | version | entry count | entries...
//! entry: name length | UTF-8 name | rank | dims... | f32 LE data
//! ```
//!
//! Entries are written in name order, so identical weights give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::detector::{DetectorConfig, DetectorWeights};
use crate::ndtensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CCYD";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::WeightFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::WeightFormat("bad magic, not a weight file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version} (expected {VERSION})")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::WeightFormat("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::WeightFormat(format!("`{name}` dims overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::WeightFormat("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::WeightFormat(format!("`{name}`: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::WeightFormat(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, weights: &DetectorWeights) -> Result<()> {
    fs::write(path, encode(weights.tensors())).map_err(|e| Error::io(path, e))
}

/// Loads tensors and checks them against `config`.
pub fn load(path: &Path, config: &DetectorConfig) -> Result<DetectorWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DetectorWeights::from_tensors(config.clone(), decode(&bytes)?)
}
