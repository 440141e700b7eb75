//! Named-tensor container.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "WNGT"
//! version    u32      1
//! header_len u32      byte length of the UTF-8 header that follows
//! header     bytes    free-form (JSON for model checkpoints, may be empty)
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims u64 × rank
//!   values   f64 × product(dims), IEEE-754 little-endian
//! ```
//!
//! A JSON mirror (`{"header": ..., "tensors": [{"name", "shape", "values"}]}`)
//! is provided for small tensors used in tests and inspection.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WNGT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NamedTensors {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct JsonEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonMirror {
    header: String,
    tensors: Vec<JsonEntry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl NamedTensors {
    pub fn new(header: impl Into<String>) -> Self {
        NamedTensors {
            header: header.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(NamedTensors { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_json(&self) -> String {
        let mirror = JsonMirror {
            header: self.header.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| JsonEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&mirror).expect("tensor mirror serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mirror: JsonMirror = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tensors = mirror
            .tensors
            .into_iter()
            .map(|e| Tensor::new(e.shape, e.values).map(|t| (e.name, t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(NamedTensors {
            header: mirror.header,
            tensors,
        })
    }
}
