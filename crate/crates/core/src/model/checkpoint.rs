//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, JSON manifest,
//! then every tensor's little-endian `f32` payload in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelConfig, ModelState, Param, ParamGroup};

const MAGIC: &[u8; 8] = b"WSEGCKPT";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
}

pub fn write_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut offset = 0;
    let tensors = state
        .params
        .iter()
        .map(|(name, p)| {
            let e = TensorEntry {
                name: name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                offset,
            };
            offset += p.value.len() * 4;
            e
        })
        .collect();
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: state.config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in state.params.values() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(bad(format!("unsupported schema version {}", manifest.schema_version)));
    }
    let payload = &bytes[16 + len..];
    let mut params = BTreeMap::new();
    let mut expected = 0;
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(bad(format!("tensor {} has offset {} (expected {expected})", e.name, e.offset)));
        }
        let raw = payload
            .get(e.offset..e.offset + n * 4)
            .ok_or_else(|| bad(format!("truncated payload for {}", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        expected += n * 4;
        let value = Tensor::new(e.shape, data)?;
        params.insert(
            e.name,
            Param {
                group: e.group,
                value,
                trainable: e.trainable,
            },
        );
    }
    if expected != payload.len() {
        return Err(bad("trailing bytes after payload"));
    }
    ModelState::from_parts(manifest.config, params)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    read_checkpoint(&fs::read(path)?)
}

/// Hex SHA-256 of the archive bytes.
pub fn checkpoint_digest(state: &ModelState) -> String {
    hex::encode(Sha256::digest(write_checkpoint(state)))
}

/// Hex SHA-256 over tensor names, shapes and values only, ignoring freeze flags.
pub fn weights_digest(state: &ModelState) -> String {
    let mut h = Sha256::new();
    for (name, p) in &state.params {
        h.update(name.as_bytes());
        h.update([0]);
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
