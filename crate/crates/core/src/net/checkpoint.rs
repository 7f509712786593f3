//! Checkpoint layout: `CVCK`, a u32 LE header length, a JSON header
//! `{config, tensors: [{name, offset, len}]}` and then the CVT1 blobs of
//! every tensor back to back. Offsets are relative to the end of the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::cvt::{self, DType};

const MAGIC: &[u8; 4] = b"CVCK";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

pub fn encode_checkpoint(cfg: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    params.validate(cfg)?;
    let mut body = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in &params.tensors {
        let blob = cvt::encode(t, DType::F64);
        tensors.push(Entry {
            name: name.clone(),
            offset: body.len(),
            len: blob.len(),
        });
        body.extend_from_slice(&blob);
    }
    let header = serde_json::to_vec(&Header {
        config: cfg.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(ModelConfig, ModelParams), String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body_start = 8 + hlen;
    if bytes.len() < body_start {
        return Err("truncated header".into());
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..body_start]).map_err(|e| format!("header: {e}"))?;
    let body = &bytes[body_start..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let blob = body
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| format!("tensor {} out of bounds", e.name))?;
        let t = cvt::decode(blob).map_err(|m| format!("tensor {}: {m}", e.name))?;
        tensors.insert(e.name, t);
    }
    let params = ModelParams { tensors };
    params.validate(&header.config).map_err(|e| e.to_string())?;
    Ok((header.config, params))
}

/// Writes through a temporary sibling and a rename.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let bytes = encode_checkpoint(cfg, params)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|m| Error::format(path, m))
}
