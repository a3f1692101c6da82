//! Persistence: model checkpoints, the signature registry and experiment configs.
//!
//! Every mutation is written to a temporary path and renamed into place, so a
//! reader observes either the old or the new state.

mod checkpoint;
mod config;
mod registry;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::{
    checkpoint_id, load_checkpoint, save_checkpoint, AdamState, Checkpoint, CheckpointManifest, TensorEntry,
    CHECKPOINT_FORMAT_VERSION,
};
pub use config::ExperimentConfig;
pub use registry::{IndexEntry, Registry, RegistryIndex, REGISTRY_FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("record {0} already exists")]
    Conflict(String),
    #[error("record {0} not found")]
    NotFound(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("registry is locked by another writer ({0})")]
    Locked(PathBuf),
    #[error("malformed document {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("injected failure at {0}")]
    Injected(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = tmp_sibling(path);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub(crate) fn tmp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

pub(crate) fn write_f32(path: &Path, values: &[f32]) -> Result<(), StoreError> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

pub(crate) fn write_f64(path: &Path, values: &[f64]) -> Result<(), StoreError> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads exactly `len` little-endian `f32` values.
pub(crate) fn read_f32(path: &Path, len: usize) -> Result<Vec<f32>, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != len * 4 {
        return Err(StoreError::Integrity(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            len * 4
        )));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

pub(crate) fn read_f64(path: &Path, len: usize) -> Result<Vec<f64>, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != len * 8 {
        return Err(StoreError::Integrity(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            len * 8
        )));
    }
    Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Format { path: path.to_path_buf(), message: e.to_string() })
}

pub(crate) fn to_json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(value).expect("serialisable document")
}
