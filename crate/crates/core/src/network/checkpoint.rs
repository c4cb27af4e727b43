//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! "NRMD" | version u32 | config hash u64 | header length u32 | header JSON
//! block count u32 | (length u64 | f64 × length)*
//! ```
//!
//! The header holds the resolved model config and the schema; the hash is
//! the first 8 bytes of its SHA-256. Blocks are every trainable parameter in
//! graph order followed by the running mean and variance of each BatchNorm
//! layer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::features::Schema;
use crate::norm::NormKind;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NRMD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schema: Schema,
}

fn header_hash(json: &[u8]) -> u64 {
    let digest = Sha256::digest(json);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = Header { config: self.config.clone(), schema: self.schema.clone() };
        let json = serde_json::to_vec(&header).map_err(|e| Error::CorruptCheckpoint(format!("encoding header: {e}")))?;
        let mut blocks: Vec<Vec<f64>> = self.params().iter().map(|p| p.value.as_slice().to_vec()).collect();
        for layer in self.field_norm.layers().iter().chain(self.layers.iter().map(|l| &l.norm)) {
            if layer.kind() == NormKind::BatchNorm {
                blocks.push(layer.running_mean().to_vec());
                blocks.push(layer.running_var().to_vec());
            }
        }
        let mut out = Vec::with_capacity(24 + json.len() + blocks.iter().map(|b| 8 + 8 * b.len()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_hash(&json).to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for block in &blocks {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let hash = r.u64()?;
        let len = r.u32()? as usize;
        let json = r.take(len)?;
        if header_hash(json) != hash {
            return Err(Error::CorruptCheckpoint("config hash does not match header".into()));
        }
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let mut model = Model::build(&header.config, &header.schema, 0)
            .map_err(|e| Error::CorruptCheckpoint(format!("header describes an invalid model: {e}")))?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("block length overflow".into()))?)?;
            blocks.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<f64>>());
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let expected = model.params().len() + model_bn_blocks(&model);
        if blocks.len() != expected {
            return Err(Error::CorruptCheckpoint(format!("{} parameter blocks where {expected} expected", blocks.len())));
        }
        let mut blocks = blocks.into_iter();
        let mut next = |expected: usize| -> Result<Vec<f64>> {
            let b = blocks.next().ok_or_else(|| Error::CorruptCheckpoint("too few parameter blocks".into()))?;
            if b.len() != expected {
                return Err(Error::CorruptCheckpoint(format!("block of {} values where {expected} expected", b.len())));
            }
            Ok(b)
        };
        for p in model.params_mut() {
            let b = next(p.value.len())?;
            p.value.as_mut_slice().copy_from_slice(&b);
        }
        for layer in model.norm_layers_mut() {
            if layer.kind() == NormKind::BatchNorm {
                let mean = next(layer.width())?;
                let var = next(layer.width())?;
                layer.set_running_stats(mean, var).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
            }
        }
        Ok(model)
    }
}

fn model_bn_blocks(model: &Model) -> usize {
    2 * model
        .field_norm
        .layers()
        .iter()
        .chain(model.layers.iter().map(|l| &l.norm))
        .filter(|l| l.kind() == NormKind::BatchNorm)
        .count()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = model.to_checkpoint_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    Model::from_checkpoint_bytes(&bytes)
}
