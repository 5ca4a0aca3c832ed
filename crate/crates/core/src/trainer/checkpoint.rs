//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DDCL"                       magic
//! u32                          format version
//! u64                          epoch counter
//! u64 len, bytes               config echo (JSON)
//! u32 count, {u32 len, bytes, u64}*      named counters
//! u32 count, {u32 len, bytes, u32 ndim, u64 dim*}*   tensor manifest
//! {u64 count, f64*}*           tensor data in manifest order
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{DdclError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDCL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub config_json: String,
    pub counters: Vec<(String, u64)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.counters.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Equality on the bit patterns of every float.
    pub fn bit_identical(&self, other: &Checkpoint) -> bool {
        self.epoch == other.epoch
            && self.config_json == other.config_json
            && self.counters == other.counters
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.len() == b.data.len()
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.epoch);
        w.long_str(&self.config_json);
        w.u32(self.counters.len() as u32);
        for (name, value) in &self.counters {
            w.short_str(name);
            w.u64(*value);
        }
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.short_str(&t.name);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
        }
        for t in &self.tensors {
            w.u64(t.data.len() as u64);
            w.f64s(&t.data);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(DdclError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DdclError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let epoch = r.u64()?;
        let config_json = r.long_str()?;
        let n_counters = r.u32()?;
        let mut counters = Vec::new();
        for _ in 0..n_counters {
            let name = r.short_str()?;
            counters.push((name, r.u64()?));
        }
        let n_tensors = r.u32()?;
        let mut manifest = Vec::new();
        for _ in 0..n_tensors {
            let name = r.short_str()?;
            let ndim = r.u32()?;
            let shape = (0..ndim)
                .map(|_| r.len_u64())
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let count = r.len_u64()?;
            let expected: usize = shape.iter().product();
            if count != expected {
                return Err(DdclError::Format(format!(
                    "tensor {name}: {count} values for shape {shape:?}"
                )));
            }
            let data = r.f64s(count)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        r.expect_end()?;
        Ok(Self {
            epoch,
            config_json,
            counters,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()).map_err(|e| DdclError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DdclError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
