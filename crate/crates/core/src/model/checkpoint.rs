//! Checkpoint layout: magic `FDCK`, `u32` little-endian header length, a JSON
//! header, then every parameter as little-endian `f64` in canonical order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

/// Everything stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub ema: bool,
    /// Training regime that produced the weights, e.g. `source_only`.
    pub training: String,
    pub model: ModelConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    dtype: String,
    #[serde(flatten)]
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

pub fn encode_checkpoint(params: &ModelParams, meta: &CheckpointMeta) -> Vec<u8> {
    let store = params.store();
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: "f64".into(),
        meta: meta.clone(),
        params: (0..store.len())
            .map(|i| ParamEntry { name: store.name(i).to_string(), shape: store.get(i).shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 8 * store.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelParams, CheckpointMeta), CheckpointError> {
    let corrupt = |reason: String| CheckpointError::Corrupt { path: path.to_path_buf(), reason };
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing FDCK header".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes.get(8..8 + hlen).ok_or_else(|| corrupt("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(e.to_string()))?;
    if header.format_version != FORMAT_VERSION || header.dtype != "f64" {
        return Err(corrupt(format!("unsupported format {} / {}", header.format_version, header.dtype)));
    }
    let mut payload = &bytes[8 + hlen..];
    let mut store = ParamStore::new();
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        if payload.len() < 8 * n {
            return Err(corrupt(format!("truncated data for {}", entry.name)));
        }
        let data = payload[..8 * n].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        payload = &payload[8 * n..];
        store.push(entry.name, Tensor::new(entry.shape, data).expect("size checked"));
    }
    if !payload.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", payload.len())));
    }
    let params = ModelParams::from_store(header.meta.model, store)
        .ok_or_else(|| corrupt("parameter layout does not match the model".into()))?;
    Ok((params, header.meta))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(params, meta)).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes, path)
}
