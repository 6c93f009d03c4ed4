//! Named-tensor container and model checkpoints.
//!
//! File layout: magic `BTC1`, format version (u32 LE), tensor count
//! (u32 LE), then per tensor: name length (u16 LE) + UTF-8 name,
//! is_layernorm flag (u8), ndim (u8), dims (u64 LE each), raw f64 LE
//! payload. The rest of the file is a JSON blob (for checkpoints:
//! `arch_config` and `tau`). Round trips are bit-exact.

use crate::error::{Error, Result};
use crate::model::{ArchConfig, DualEncoder, Param};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"BTC1";
pub const FORMAT_VERSION: u32 = 1;

/// One tensor entry of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub is_layernorm: bool,
    pub data: Vec<f64>,
}

/// Serialize a named-tensor map plus a trailing JSON value.
pub fn write_container(
    path: &Path,
    tensors: &BTreeMap<String, NamedTensor>,
    meta: &serde_json::Value,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(u8::from(t.is_layernorm));
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} does not match {} values",
                t.shape,
                t.data.len()
            )));
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a container written by [`write_container`].
pub fn read_container(path: &Path) -> Result<(BTreeMap<String, NamedTensor>, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;

    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Parse(format!(
                "container truncated at byte {} of {}",
                *pos,
                bytes.len()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Parse("bad magic, not a BTC1 container".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported container version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| Error::Parse(format!("bad tensor name: {e}")))?;
        let is_layernorm = take(&mut pos, 1)?[0] != 0;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, NamedTensor { shape, is_layernorm, data });
    }
    let meta: serde_json::Value = serde_json::from_slice(&bytes[pos..])
        .map_err(|e| Error::Parse(format!("bad trailing JSON: {e}")))?;
    Ok((tensors, meta))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch_config: ArchConfig,
    tau: f64,
}

/// A full snapshot of a [`DualEncoder`]: every parameter, the architecture,
/// and the pretrained temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: BTreeMap<String, NamedTensor>,
    pub arch: ArchConfig,
    pub tau: f64,
}

impl Checkpoint {
    pub fn from_model(model: &DualEncoder) -> Checkpoint {
        let tensors = model
            .params()
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    NamedTensor {
                        shape: p.shape.clone(),
                        is_layernorm: p.is_layernorm,
                        data: p.data.clone(),
                    },
                )
            })
            .collect();
        Checkpoint {
            version: FORMAT_VERSION,
            tensors,
            arch: model.arch.clone(),
            tau: model.tau,
        }
    }

    /// Restore every parameter bit-exactly. The checkpoint must carry the
    /// same architecture and exactly the model's tensor names.
    pub fn apply(&self, model: &mut DualEncoder) -> Result<()> {
        if self.arch != model.arch {
            return Err(Error::Checkpoint(
                "architecture mismatch between checkpoint and model".into(),
            ));
        }
        for name in model.params().keys() {
            if !self.tensors.contains_key(name) {
                return Err(Error::Checkpoint(format!("checkpoint is missing tensor {name}")));
            }
        }
        for name in self.tensors.keys() {
            if model.param(name).is_none() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has unexpected tensor {name}"
                )));
            }
        }
        for (name, t) in &self.tensors {
            let p = model.params_mut().get_mut(name).unwrap();
            if p.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match model {:?}",
                    t.shape, p.shape
                )));
            }
            p.data.clone_from(&t.data);
        }
        model.tau = self.tau;
        Ok(())
    }

    /// Instantiate a fresh model from this checkpoint.
    pub fn build_model(&self) -> Result<DualEncoder> {
        let mut model = DualEncoder::new(self.arch.clone(), 0)?;
        self.apply(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(CheckpointMeta {
            arch_config: self.arch.clone(),
            tau: self.tau,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_container(path, &self.tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (tensors, meta) = read_container(path)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Parse(format!("bad checkpoint metadata: {e}")))?;
        Ok(Checkpoint {
            version: FORMAT_VERSION,
            tensors,
            arch: meta.arch_config,
            tau: meta.tau,
        })
    }
}

impl DualEncoder {
    /// Bit-exact snapshot of the full parameter set.
    pub fn snapshot(&self) -> Checkpoint {
        Checkpoint::from_model(self)
    }

    /// Restore a snapshot; see [`Checkpoint::apply`].
    pub fn restore(&mut self, snapshot: &Checkpoint) -> Result<()> {
        snapshot.apply(self)
    }
}

#[allow(dead_code)]
fn param_as_tensor(p: &Param) -> NamedTensor {
    NamedTensor { shape: p.shape.clone(), is_layernorm: p.is_layernorm, data: p.data.clone() }
}
