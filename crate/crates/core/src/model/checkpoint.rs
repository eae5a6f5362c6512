//! Single-file checkpoint format.
//!
//! ```text
//! magic      8 bytes   "LOOPCKPT"
//! version    u32 LE
//! precision  u32 LE    32 or 64
//! config     u64 LE length + UTF-8 JSON (ModelConfig)
//! metadata   u64 LE length + UTF-8 JSON object
//! count      u64 LE
//! tensor*    u32 name length, name, u32 rank, rank × u64 dims,
//!            numel × little-endian floats
//! ```
//!
//! Tensors whose names start with [`AUX_PREFIX`] are not model parameters
//! (optimizer moments and similar).

use std::collections::HashMap;
use std::path::Path;

use super::config::ModelConfig;
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LOOPCKPT";
pub const VERSION: u32 = 1;
pub const AUX_PREFIX: &str = "aux/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_parameters(params: &Parameters<S>) -> Self {
        Checkpoint {
            config: params.config().clone(),
            metadata: serde_json::json!({}),
            tensors: params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn parameters(&self) -> Result<Parameters<S>> {
        let named: HashMap<String, Tensor<S>> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(AUX_PREFIX))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Parameters::from_named(&self.config, named)
    }

    pub fn aux(&self, name: &str) -> Option<&Tensor<S>> {
        let full = format!("{AUX_PREFIX}{name}");
        self.tensors.iter().find(|(n, _)| *n == full).map(|(_, t)| t)
    }

    pub fn push_aux(&mut self, name: &str, t: Tensor<S>) {
        self.tensors.push((format!("{AUX_PREFIX}{name}"), t));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&S::PRECISION.bits().to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parse a checkpoint, converting the payload to `S` if it was written at
    /// the other precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let bits = r.u32()?;
        let precision =
            Precision::from_bits(bits).ok_or_else(|| Error::Checkpoint(format!("unknown precision {bits}")))?;
        let n = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
        let n = r.u64()? as usize;
        let metadata: serde_json::Value = serde_json::from_slice(r.take(n)?)?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data: Vec<S> = match precision {
                Precision::F32 => r
                    .take(numel * 4)?
                    .chunks_exact(4)
                    .map(|c| S::of(f32::read_le(c) as f64))
                    .collect(),
                Precision::F64 => r
                    .take(numel * 8)?
                    .chunks_exact(8)
                    .map(|c| S::of(f64::read_le(c)))
                    .collect(),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
