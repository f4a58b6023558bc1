//! Checkpoints: a JSON manifest (`<name>.json`) naming every tensor and its
//! shape, plus a little-endian f64 blob (`<name>.bin`) in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    param_count: usize,
    tensors: Vec<TensorEntry>,
    blob: String,
    blob_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

pub fn checkpoint_save(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    params.check(&config.param_specs()?)?;
    let blob_path = path.with_extension("bin");
    let mut blob = Vec::with_capacity(params.numel() * 8);
    for t in params.tensors() {
        t.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        param_count: params.numel(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        blob: blob_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    std::fs::write(&blob_path, &blob)?;
    std::fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads and validates a checkpoint. Any inconsistency is a `Load` error and
/// nothing partial is returned.
pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| Error::Load(format!("{}: {msg}", path.display()));
    let text = std::fs::read(path).map_err(|e| fail(e.to_string()))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| fail(format!("bad manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "format version {} unsupported (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let blob = std::fs::read(dir.join(&manifest.blob)).map_err(|e| fail(format!("blob {}: {e}", manifest.blob)))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(fail(format!("blob {} fails its checksum", manifest.blob)));
    }
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if expected != manifest.param_count || blob.len() != expected * 8 {
        return Err(fail(format!(
            "blob holds {} bytes, manifest declares {} values",
            blob.len(),
            manifest.param_count
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let len = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(len).collect();
        named.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    let params = ModelParams::from_named(named).map_err(|e| fail(e.to_string()))?;
    let specs = manifest.config.param_specs().map_err(|e| fail(e.to_string()))?;
    params.check(&specs).map_err(|e| fail(e.to_string()))?;
    Ok(Checkpoint {
        config: manifest.config,
        params,
    })
}
