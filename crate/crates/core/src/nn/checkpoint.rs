//! Single-file archive: `DCLCKPT1`, a little-endian `u64` header length, a
//! JSON header (metadata plus tensor names and shapes), then every tensor as
//! little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dcl_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelSet, OptimizerState, ParamSet};
use crate::error::{DclError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCLCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl CheckpointFile {
    pub fn tensor_map(&self) -> BTreeMap<&str, &Tensor<f32>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }
}

/// Write to a sibling temporary file and rename, so readers never observe a
/// partial archive.
pub fn write_checkpoint(path: &Path, ck: &CheckpointFile) -> Result<()> {
    let header = Header {
        format: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        meta: ck.meta.clone(),
        tensors: ck
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| DclError::json(path, e))?;
    let payload: usize = ck.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + payload);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in &ck.tensors {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    crate::util::write_atomic(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = fs::read(path).map_err(|e| DclError::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(DclError::format(path, "not a DCLCKPT1 checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| DclError::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| DclError::json(path, e))?;
    let mut pos = 16 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| DclError::format(path, format!("truncated tensor {}", entry.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((entry.name, Tensor::new(&entry.shape, data)));
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(DclError::format(path, "trailing bytes after the last tensor"));
    }
    Ok(CheckpointFile {
        meta: header.meta,
        tensors,
    })
}

pub(crate) fn push_params(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, p: &ParamSet<f32>) {
    for (n, t) in p.names().iter().zip(p.tensors()) {
        out.push((format!("{prefix}.{n}"), t.clone()));
    }
}

/// Overwrite every tensor of `p` from `map`, checking names and shapes.
pub(crate) fn fill_params(
    p: &mut ParamSet<f32>,
    prefix: &str,
    map: &BTreeMap<&str, &Tensor<f32>>,
    path: &Path,
) -> Result<()> {
    let names: Vec<String> = p.names().to_vec();
    for (n, t) in names.iter().zip(p.tensors_mut()) {
        let key = format!("{prefix}.{n}");
        let src = map
            .get(key.as_str())
            .ok_or_else(|| DclError::format(path, format!("missing tensor {key}")))?;
        if src.shape() != t.shape() {
            return Err(DclError::format(
                path,
                format!("tensor {key} has shape {:?}, expected {:?}", src.shape(), t.shape()),
            ));
        }
        *t = (*src).clone();
    }
    Ok(())
}

pub(crate) fn push_optimizer(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, st: &OptimizerState<f32>) {
    for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
        out.push((format!("{prefix}.m{i}"), m.clone()));
        out.push((format!("{prefix}.v{i}"), v.clone()));
    }
}

pub(crate) fn fill_optimizer(
    st: &mut OptimizerState<f32>,
    prefix: &str,
    map: &BTreeMap<&str, &Tensor<f32>>,
    path: &Path,
) -> Result<()> {
    for i in 0..st.m.len() {
        for (tag, slot) in [("m", &mut st.m[i]), ("v", &mut st.v[i])] {
            let key = format!("{prefix}.{tag}{i}");
            let src = map
                .get(key.as_str())
                .ok_or_else(|| DclError::format(path, format!("missing tensor {key}")))?;
            if src.shape() != slot.shape() {
                return Err(DclError::format(path, format!("tensor {key} has the wrong shape")));
            }
            *slot = (*src).clone();
        }
    }
    Ok(())
}

impl ModelSet<f32> {
    pub(crate) fn to_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (prefix, p) in self.named_groups() {
            push_params(&mut out, &prefix, p);
        }
        out
    }

    pub(crate) fn from_checkpoint(config: &ModelConfig, ck: &CheckpointFile, path: &Path) -> Result<Self> {
        let mut m = super::build_models::<f32>(config, 0)?;
        let map = ck.tensor_map();
        fill_params(&mut m.encoder, "encoder", &map, path)?;
        fill_params(&mut m.decoder, "decoder", &map, path)?;
        if let Some(r) = m.rgb_encoder.as_mut() {
            fill_params(r, "rgb_encoder", &map, path)?;
        }
        fill_params(&mut m.discriminator, "discriminator", &map, path)?;
        for (i, h) in m.heads.iter_mut().enumerate() {
            fill_params(h, &format!("head{i}"), &map, path)?;
        }
        Ok(m)
    }
}
