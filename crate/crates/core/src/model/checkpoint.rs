//! Checkpoint files: one line of JSON header, then little-endian parameter blobs.
//!
//! The header holds the model config, seed, dtype, a manifest of
//! `(name, shape, offset, len)` per parameter (offsets in bytes from the
//! first blob) and free-form metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_model, Model, ModelConfig};
use crate::tensor::{DType, Element, Tensor};
use crate::{Error, Result};

pub const FORMAT: &str = "bixt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub dtype: DType,
    pub config: ModelConfig,
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn width(dtype: DType) -> usize {
    match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    }
}

pub fn to_bytes<T: Element>(model: &Model<T>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0;
    let params = model
        .params
        .entries()
        .iter()
        .map(|e| {
            let entry = ManifestEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                offset,
                len: e.value.len(),
            };
            offset += e.value.len() * width(T::DTYPE);
            entry
        })
        .collect();
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        seed: model.seed,
        dtype: T::DTYPE,
        config: model.config.clone(),
        params,
        meta,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for e in model.params.entries() {
        out.extend(T::to_le_bytes_vec(e.value.data()));
    }
    Ok(out)
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<(Model<T>, CheckpointHeader)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "stored as {:?}, requested {:?}",
            header.dtype, T::DTYPE
        )));
    }
    let blobs = &bytes[split + 1..];
    let mut model = init_model::<T>(&header.config, header.seed)?;
    if model.params.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, config builds {}",
            header.params.len(),
            model.params.len()
        )));
    }
    let w = width(T::DTYPE);
    for entry in &header.params {
        let target = model
            .params
            .by_name_mut(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        if target.shape() != entry.shape.as_slice() || entry.len != target.len() {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                target.shape()
            )));
        }
        let end = entry.offset + entry.len * w;
        let raw = blobs
            .get(entry.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("{}: blob truncated", entry.name)))?;
        *target = Tensor::new(entry.shape.clone(), T::from_le_bytes_slice(raw))?;
    }
    Ok((model, header))
}

pub fn save<T: Element>(model: &Model<T>, meta: serde_json::Value, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Reads only the header line.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    serde_json::from_slice(&bytes[..end]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))
}
