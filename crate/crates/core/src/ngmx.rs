//! NGMX dense-array container.
//!
//! Layout (little-endian):
//! - magic `NGMX`
//! - version: u16 (= 1)
//! - dtype: u8 (0 = float32, 1 = uint8)
//! - ndim: u8
//! - dims: ndim x u32
//! - payload: product(dims) elements, row-major

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::label::LabelMatrix;
use crate::spectral::SpectrogramStack;

pub const MAGIC: &[u8; 4] = b"NGMX";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum NgmxData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl NgmxData {
    fn len(&self) -> usize {
        match self {
            NgmxData::F32(v) => v.len(),
            NgmxData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgmxArray {
    pub dims: Vec<usize>,
    pub data: NgmxData,
}

impl NgmxArray {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, NgmxData::F32(data))
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, NgmxData::U8(data))
    }

    fn new(dims: Vec<usize>, data: NgmxData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::invalid("NGMX supports at most 255 dimensions"));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::invalid("NGMX dimensions must fit in u32"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                context: "NGMX payload".into(),
                expected: dims,
                actual: vec![data.len()],
            });
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.data.len();
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.data {
            NgmxData::F32(_) => 0,
            NgmxData::U8(_) => 1,
        });
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            NgmxData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            NgmxData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::format("NGMX", r.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing NGMX magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Version {
                what: "NGMX",
                found: version,
                supported: VERSION,
            });
        }
        let dtype = bytes[6];
        let ndim = bytes[7] as usize;
        let header = 8 + 4 * ndim;
        if bytes.len() < header {
            return Err(bad("truncated dimension header"));
        }
        let dims: Vec<usize> = bytes[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dimension product overflows"))?;
        let payload = &bytes[header..];
        let data = match dtype {
            0 => {
                if payload.len() != n * 4 {
                    return Err(bad("float32 payload length does not match dims"));
                }
                NgmxData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            1 => {
                if payload.len() != n {
                    return Err(bad("uint8 payload length does not match dims"));
                }
                NgmxData::U8(payload.to_vec())
            }
            other => return Err(bad(&format!("unknown dtype code {other}"))),
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Float payload; uint8 arrays are widened.
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            NgmxData::F32(v) => v.clone(),
            NgmxData::U8(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

impl From<&LabelMatrix> for NgmxArray {
    fn from(m: &LabelMatrix) -> Self {
        NgmxArray {
            dims: m.shape().to_vec(),
            data: NgmxData::U8(m.as_slice().to_vec()),
        }
    }
}

impl TryFrom<NgmxArray> for LabelMatrix {
    type Error = Error;

    fn try_from(a: NgmxArray) -> Result<Self> {
        match (a.dims.as_slice(), a.data) {
            (&[f, b], NgmxData::U8(v)) => LabelMatrix::from_vec(f, b, v),
            _ => Err(Error::format("NGMX", "label matrix must be a 2-D uint8 array")),
        }
    }
}

impl From<&SpectrogramStack> for NgmxArray {
    fn from(s: &SpectrogramStack) -> Self {
        NgmxArray {
            dims: vec![s.n_frames(), s.n_bins(), s.n_channels()],
            data: NgmxData::F32(s.as_slice().to_vec()),
        }
    }
}
