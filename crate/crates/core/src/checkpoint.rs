//! Binary tensor container.
//!
//! Layout: 8-byte little-endian header length, a JSON manifest of that
//! many bytes, then the raw little-endian `f32` payload. The manifest holds
//! free-form metadata plus a directory of `name -> (dtype, shape, offset)`
//! entries whose offsets are relative to the start of the payload.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl TensorFile {
    /// Removes and returns every tensor, keyed by name.
    pub fn into_map(self) -> HashMap<String, Tensor<f32>> {
        self.tensors.into_iter().collect()
    }
}

pub fn encode(meta: &serde_json::Value, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            dtype: f32::DTYPE.into(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        payload.reserve(t.numel() * 4);
        for &x in t.data() {
            x.write_le(&mut payload);
        }
    }
    let header = serde_json::to_vec(&Manifest {
        meta: meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("file shorter than its header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..).ok_or_else(|| bad("truncated"))?;
    if hlen > body.len() {
        return Err(bad("header length exceeds file size"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..hlen])?;
    let payload = &body[hlen..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != f32::DTYPE {
            return Err(Error::Checkpoint(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let raw = payload
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", e.name)))?;
        let data = raw.chunks_exact(4).map(f32::read_le).collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(TensorFile {
        meta: manifest.meta,
        tensors,
    })
}

/// Writes through a temporary sibling so a crash never leaves a torn file.
pub fn write(path: &Path, meta: &serde_json::Value, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<TensorFile> {
    decode(&std::fs::read(path)?)
}

/// Model-only view: `meta.config` plus the named parameter tensors.
pub fn save_model(path: &Path, cfg: &ModelConfig, params: &ModelParams<Tensor<f32>>) -> Result<()> {
    let meta = serde_json::json!({ "config": cfg });
    write(path, &meta, &model_entries(params))
}

pub fn model_entries(params: &ModelParams<Tensor<f32>>) -> Vec<(String, &Tensor<f32>)> {
    params.named()
}

pub fn model_from_file(file: &TensorFile) -> Result<(ModelConfig, ModelParams<Tensor<f32>>)> {
    let cfg: ModelConfig = serde_json::from_value(
        file.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("manifest has no model config".into()))?,
    )?;
    cfg.validate()?;
    let by_name: HashMap<&str, &Tensor<f32>> =
        file.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let params = ModelParams::from_lookup(&cfg, |n| by_name.get(n).map(|t| (*t).clone()))?;
    Ok((cfg, params))
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams<Tensor<f32>>)> {
    model_from_file(&read(path)?)
}
