//! Checkpoint serialization: a JSON manifest describing every parameter
//! (name, shape, element type, sha256 of its little-endian bytes) plus a
//! flat binary blob of values in manifest order, and a config snapshot so
//! a checkpoint is self-describing.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::ParamStore;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checksum mismatch for parameter {0:?}")]
    Checksum(String),
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
    #[error("blob length {got} != expected {want}")]
    BlobLength { got: usize, want: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Hex sha256 of this tensor's little-endian byte range in the blob.
    pub sha256: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn tensor_bytes(data: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `path` (JSON manifest) and the sibling `.bin` blob.
pub fn save(
    path: &Path,
    store: &ParamStore,
    config: serde_json::Value,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut blob = Vec::new();
    for p in store.iter() {
        let bytes = tensor_bytes(&p.data);
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            dtype: "f64".to_string(),
            sha256: hex_digest(&bytes),
            offset: blob.len(),
            len: bytes.len(),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: 1,
        tensors,
        config,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err(path))?;
        }
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, json).map_err(io_err(path))?;
    let bp = blob_path(path);
    std::fs::File::create(&bp)
        .and_then(|mut f| f.write_all(&blob))
        .map_err(io_err(&bp))?;
    Ok(())
}

/// Reads just the manifest, e.g. to rebuild a model from its config
/// snapshot before loading values.
pub fn load_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let json = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&json)?)
}

/// Restores parameter values into an already-registered store. Names and
/// shapes must match exactly; every tensor's checksum is verified.
pub fn load(path: &Path, store: &mut ParamStore) -> Result<Manifest, CheckpointError> {
    let manifest = load_manifest(path)?;
    let bp = blob_path(path);
    let mut blob = Vec::new();
    std::fs::File::open(&bp)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(io_err(&bp))?;

    let want: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if blob.len() != want {
        return Err(CheckpointError::BlobLength {
            got: blob.len(),
            want,
        });
    }
    if manifest.tensors.len() != store.len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "checkpoint has {} tensors, store has {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    for entry in &manifest.tensors {
        let pid = store.lookup(&entry.name).ok_or_else(|| {
            CheckpointError::ParamMismatch(format!("store lacks {:?}", entry.name))
        })?;
        let bytes = &blob[entry.offset..entry.offset + entry.len];
        if hex_digest(bytes) != entry.sha256 {
            return Err(CheckpointError::Checksum(entry.name.clone()));
        }
        let p = store.param_mut(pid);
        if p.shape != entry.shape {
            return Err(CheckpointError::ParamMismatch(format!(
                "{:?}: checkpoint shape {:?}, store shape {:?}",
                entry.name, entry.shape, p.shape
            )));
        }
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            p.data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(manifest)
}
