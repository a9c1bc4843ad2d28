//! Checkpoint file: an 8-byte little-endian header length, a JSON header,
//! then every tensor's values as little-endian `f64` in name order.
//!
//! ```text
//! { "version": "gpgnn-ckpt-1",
//!   "tensors": { "<name>": { "shape": [..], "offset": <byte offset>, .. } },
//!   "metadata": { .. } }
//! ```
//!
//! Offsets are relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParameterStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "gpgnn-ckpt-1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frozen_row: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Parameters and metadata read back from a checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    pub store: ParameterStore,
    pub metadata: serde_json::Value,
}

pub fn checkpoint_bytes(store: &ParameterStore, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0;
    for (_, p) in store.iter_sorted() {
        tensors.insert(
            p.name().to_string(),
            TensorEntry {
                shape: p.tensor().shape().to_vec(),
                offset,
                trainable: p.trainable(),
                frozen_row: p.frozen_row(),
            },
        );
        offset += p.tensor().numel() * 8;
    }
    let header = serde_json::to_vec(&Header {
        version: CHECKPOINT_VERSION.to_string(),
        tensors,
        metadata: metadata.clone(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in store.iter_sorted() {
        for v in p.tensor().values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    store: &ParameterStore,
    metadata: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    let bytes = checkpoint_bytes(store, metadata)?;
    let mut file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 8 {
        return Err(bad("file shorter than header length field"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version `{}` (expected `{CHECKPOINT_VERSION}`)",
            header.version
        )));
    }
    let payload = &bytes[header_end..];
    let mut store = ParameterStore::new();
    for (name, entry) in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` runs past end of file"
            )));
        }
        let values = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape, values)?;
        store.register_with_frozen_row(&name, tensor, entry.trainable, entry.frozen_row)?;
    }
    Ok(Checkpoint {
        store,
        metadata: header.metadata,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    parse_checkpoint(&bytes)
}
