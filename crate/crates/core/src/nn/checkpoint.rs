//! NGCK checkpoints.
//!
//! Layout (little-endian):
//! - magic `NGCK`, version u16
//! - u32 length + UTF-8 JSON metadata
//! - u32 tensor count, then per tensor: u16 name length, name, u8 ndim,
//!   ndim x u32 dims, float32 data

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::detector::{ArchConfig, ErrorDetector};
use super::train::TrainConfig;
use crate::error::{Error, Result};

pub const NGCK_MAGIC: &[u8; 4] = b"NGCK";
pub const NGCK_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub arch: ArchConfig,
    pub train: Option<TrainConfig>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot of every parameter and batch-norm running statistic.
    pub fn from_detector(g: &ErrorDetector<f32>, train: Option<TrainConfig>, metrics: BTreeMap<String, f64>) -> Self {
        let mut tensors = Vec::new();
        for layer in &g.net.layers {
            for (suffix, p) in layer.params() {
                tensors.push(NamedTensor {
                    name: format!("{}.{suffix}", layer.name),
                    dims: p.dims.clone(),
                    data: p.value.clone(),
                });
            }
            for (suffix, b) in layer.buffers() {
                tensors.push(NamedTensor {
                    name: format!("{}.{suffix}", layer.name),
                    dims: vec![b.len()],
                    data: b.clone(),
                });
            }
        }
        Self {
            meta: CheckpointMeta {
                architecture: g.arch.describe(),
                arch: g.arch.clone(),
                train,
                metrics,
            },
            tensors,
        }
    }

    pub fn to_detector(&self) -> Result<ErrorDetector<f32>> {
        let mut g = ErrorDetector::<f32>::new(self.meta.arch.clone(), 0)?;
        let mut by_name: BTreeMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let bad = |r: String| Error::format("NGCK", r);
        for layer in &mut g.net.layers {
            let lname = layer.name.clone();
            let mut take = |suffix: &str, len: usize| -> Result<Vec<f32>> {
                let name = format!("{lname}.{suffix}");
                let t = by_name.remove(name.as_str()).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
                if t.data.len() != len {
                    return Err(bad(format!("tensor `{name}` has {} values, expected {len}", t.data.len())));
                }
                Ok(t.data.clone())
            };
            for (suffix, p) in layer.params_mut() {
                p.value = take(suffix, p.value.len())?;
            }
            for (suffix, b) in layer.buffers_mut() {
                *b = take(suffix, b.len())?;
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(bad(format!("unexpected tensor `{extra}`")));
        }
        Ok(g)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(NGCK_MAGIC);
        out.extend_from_slice(&NGCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != NGCK_MAGIC {
            return Err(Error::format("NGCK", "missing NGCK magic"));
        }
        let version = r.u16()?;
        if version != NGCK_VERSION {
            return Err(Error::Version {
                what: "NGCK",
                found: version,
                supported: NGCK_VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::format("NGCK", "tensor name is not UTF-8"))?;
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("NGCK", "tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("NGCK", "trailing bytes after last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("NGCK", "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
