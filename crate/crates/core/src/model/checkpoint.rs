//! Checkpoint container: an 8-byte magic, a little-endian `u64` manifest
//! length, a JSON manifest, then raw little-endian `f32` blobs.
//!
//! Blob offsets in the manifest are relative to the first byte after the
//! manifest. Every blob carries a SHA-256 checksum that is verified on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{LayerParams, LayerSpec, ModelGraph};
use crate::compute::{BatchNormState, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MSKSPCK\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Model,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ContainerKind,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
    /// `[momentum, epsilon]` per BN layer.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub batchnorm: BTreeMap<String, [f32; 2]>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes a container with the given tensors.
pub fn write_container(
    path: &Path,
    kind: ContainerKind,
    layers: Option<Vec<LayerSpec>>,
    batchnorm: BTreeMap<String, [f32; 2]>,
    tensors: &[(String, Vec<usize>, &[f32])],
    meta: serde_json::Value,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, shape, data) in tensors {
        let offset = blob.len() as u64;
        let start = blob.len();
        for v in data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            length: (blob.len() - start) as u64,
            sha256: hex::encode(Sha256::digest(&blob[start..])),
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        kind,
        dtype: "f32".into(),
        layers,
        batchnorm,
        tensors: entries,
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a container, verifying every checksum.
pub fn read_container(path: &Path) -> Result<(Manifest, BTreeMap<String, (Vec<usize>, Vec<f32>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint container (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, format!("manifest of {len} bytes overruns the file")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..body])
        .map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    if manifest.dtype != "f32" {
        return Err(Error::format(path, format!("unsupported dtype {}", manifest.dtype)));
    }
    let blob = &bytes[body..];
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
        if end > blob.len() || e.length % 4 != 0 {
            return Err(Error::format(
                path,
                format!("tensor {} at byte offset {} is truncated", e.name, body + start),
            ));
        }
        let raw = &blob[start..end];
        if hex::encode(Sha256::digest(raw)) != e.sha256 {
            return Err(Error::format(path, format!("checksum mismatch for tensor {}", e.name)));
        }
        let expected: usize = e.shape.iter().product();
        if expected * 4 != raw.len() {
            return Err(Error::format(
                path,
                format!("tensor {} has {} bytes for shape {:?}", e.name, raw.len(), e.shape),
            ));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name.clone(), (e.shape.clone(), data));
    }
    Ok((manifest, tensors))
}

/// Saves a model with arbitrary JSON metadata.
pub fn save_model(graph: &ModelGraph, path: &Path, meta: serde_json::Value) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    let mut batchnorm = BTreeMap::new();
    for (spec, p) in graph.layers().iter().zip(graph.params()) {
        let n = &spec.name;
        match p {
            LayerParams::None => {}
            LayerParams::Conv { weight } => {
                tensors.push((format!("{n}.weight"), weight.shape().to_vec(), weight.data()))
            }
            LayerParams::Bn(s) => {
                let c = vec![s.channels()];
                tensors.push((format!("{n}.gamma"), c.clone(), &s.gamma));
                tensors.push((format!("{n}.beta"), c.clone(), &s.beta));
                tensors.push((format!("{n}.running_mean"), c.clone(), &s.running_mean));
                tensors.push((format!("{n}.running_var"), c, &s.running_var));
                batchnorm.insert(n.clone(), [s.momentum, s.epsilon]);
            }
            LayerParams::Linear { weight, bias } => {
                tensors.push((format!("{n}.weight"), weight.shape().to_vec(), weight.data()));
                tensors.push((format!("{n}.bias"), bias.shape().to_vec(), bias.data()));
            }
        }
    }
    write_container(
        path,
        ContainerKind::Model,
        Some(graph.layers().to_vec()),
        batchnorm,
        &tensors,
        meta,
    )
}

/// Loads a model checkpoint and its metadata.
pub fn load_model(path: &Path) -> Result<(ModelGraph, serde_json::Value)> {
    let (manifest, mut tensors) = read_container(path)?;
    if manifest.kind != ContainerKind::Model {
        return Err(Error::format(path, "container does not hold a model"));
    }
    let layers = manifest
        .layers
        .ok_or_else(|| Error::format(path, "model manifest lacks a layer table"))?;
    let mut take = |name: String| -> Result<(Vec<usize>, Vec<f32>)> {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
    };
    let mut params = Vec::with_capacity(layers.len());
    for spec in &layers {
        let n = &spec.name;
        use super::graph::LayerKind as K;
        let p = match spec.kind {
            K::Conv { .. } => {
                let (shape, data) = take(format!("{n}.weight"))?;
                LayerParams::Conv {
                    weight: Tensor::new(&shape, data)?,
                }
            }
            K::Bn { .. } => {
                let [momentum, epsilon] = manifest
                    .batchnorm
                    .get(n)
                    .copied()
                    .ok_or_else(|| Error::format(path, format!("missing batch-norm settings for {n}")))?;
                LayerParams::Bn(BatchNormState {
                    gamma: take(format!("{n}.gamma"))?.1,
                    beta: take(format!("{n}.beta"))?.1,
                    running_mean: take(format!("{n}.running_mean"))?.1,
                    running_var: take(format!("{n}.running_var"))?.1,
                    momentum,
                    epsilon,
                })
            }
            K::Linear { .. } => {
                let (ws, wd) = take(format!("{n}.weight"))?;
                let (bs, bd) = take(format!("{n}.bias"))?;
                LayerParams::Linear {
                    weight: Tensor::new(&ws, wd)?,
                    bias: Tensor::new(&bs, bd)?,
                }
            }
            _ => LayerParams::None,
        };
        params.push(p);
    }
    Ok((ModelGraph::new(layers, params)?, manifest.meta))
}
