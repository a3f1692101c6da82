use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{io_err, read_f32, read_json, to_json, write_atomic, write_f32, StoreError};
use crate::zerowatermark::{Psi, ReferenceSignature, SignatureRecord, POOLED_DIM};

pub const REGISTRY_FORMAT_VERSION: u32 = 1;
const INDEX: &str = "index.json";
const LOCK: &str = ".lock";
const RECORDS: &str = "records";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Relative to the registry root.
    pub path: PathBuf,
    pub watermark_digest: String,
    pub checkpoint_id: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryIndex {
    pub format_version: u32,
    pub entries: BTreeMap<String, IndexEntry>,
}

impl Default for RegistryIndex {
    fn default() -> Self {
        Self { format_version: REGISTRY_FORMAT_VERSION, entries: BTreeMap::new() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RecordManifest {
    format_version: u32,
    record_id: String,
    k: usize,
    d: usize,
    pooled_dim: usize,
    seed: u64,
    watermark_digest: String,
    extractor_checkpoint_id: String,
    created_at: DateTime<Utc>,
    arrays: Vec<ArrayEntry>,
}

/// Held while a writer mutates the registry; removed on drop.
struct WriteLock(PathBuf);

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Directory-backed signature store: `index.json` plus `records/<id>/`.
///
/// Readers never lock. A single writer holds `.lock`; records are staged in
/// a temp directory and become visible only when the index is renamed.
#[derive(Clone, Debug)]
pub struct Registry {
    root: PathBuf,
    failpoint: Option<String>,
}

impl Registry {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(root.join(RECORDS)).map_err(io_err(root))?;
        Ok(Self { root: root.to_path_buf(), failpoint: None })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Makes the next `put` fail at the named point (`"before_index_rename"`).
    pub fn set_failpoint(&mut self, name: Option<&str>) {
        self.failpoint = name.map(str::to_string);
    }

    fn fail(&self, point: &str) -> Result<(), StoreError> {
        if self.failpoint.as_deref() == Some(point) {
            return Err(StoreError::Injected(point.into()));
        }
        Ok(())
    }

    pub fn index(&self) -> Result<RegistryIndex, StoreError> {
        let path = self.root.join(INDEX);
        if !path.exists() {
            return Ok(RegistryIndex::default());
        }
        let idx: RegistryIndex = read_json(&path)?;
        if idx.format_version != REGISTRY_FORMAT_VERSION {
            return Err(StoreError::Integrity(format!("unsupported registry version {}", idx.format_version)));
        }
        Ok(idx)
    }

    fn lock(&self) -> Result<WriteLock, StoreError> {
        let path = self.root.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WriteLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(StoreError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Stores a record durably and publishes it in the index.
    pub fn put(&self, record: &SignatureRecord) -> Result<String, StoreError> {
        record.signature.validate().map_err(|e| StoreError::Integrity(e.to_string()))?;
        let id = &record.record_id;
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(StoreError::Integrity(format!("invalid record id {id:?}")));
        }
        let _lock = self.lock()?;
        let mut index = self.index()?;
        if index.entries.contains_key(id) {
            return Err(StoreError::Conflict(id.clone()));
        }
        let rel = Path::new(RECORDS).join(id);
        let final_dir = self.root.join(&rel);
        // leftovers of an interrupted put that never reached the index
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(io_err(&final_dir))?;
        }
        let staging = self.root.join(RECORDS).join(format!(".{id}.tmp"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        }
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        let sig = &record.signature;
        let arrays = vec![
            ArrayEntry { name: "C".into(), shape: vec![sig.k, sig.d], file: "C.f32".into() },
            ArrayEntry { name: "psi_w".into(), shape: vec![sig.d, POOLED_DIM], file: "psi_w.f32".into() },
            ArrayEntry { name: "psi_b".into(), shape: vec![sig.d], file: "psi_b.f32".into() },
        ];
        write_f32(&staging.join("C.f32"), &sig.c)?;
        write_f32(&staging.join("psi_w.f32"), &sig.psi.weight)?;
        write_f32(&staging.join("psi_b.f32"), &sig.psi.bias)?;
        let manifest = RecordManifest {
            format_version: REGISTRY_FORMAT_VERSION,
            record_id: id.clone(),
            k: sig.k,
            d: sig.d,
            pooled_dim: POOLED_DIM,
            seed: sig.seed,
            watermark_digest: record.watermark_digest.clone(),
            extractor_checkpoint_id: record.extractor_checkpoint_id.clone(),
            created_at: record.created_at,
            arrays,
        };
        fs::write(staging.join("manifest.json"), to_json(&manifest)).map_err(io_err(&staging))?;
        fs::rename(&staging, &final_dir).map_err(io_err(&final_dir))?;
        index.entries.insert(
            id.clone(),
            IndexEntry {
                path: rel,
                watermark_digest: record.watermark_digest.clone(),
                checkpoint_id: record.extractor_checkpoint_id.clone(),
                created_at: record.created_at,
            },
        );
        self.fail("before_index_rename")?;
        write_atomic(&self.root.join(INDEX), &to_json(&index))?;
        Ok(id.clone())
    }

    /// Loads and validates a record listed in the index.
    pub fn get(&self, id: &str) -> Result<SignatureRecord, StoreError> {
        let index = self.index()?;
        let entry = index.entries.get(id).ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        let dir = self.root.join(&entry.path);
        let m: RecordManifest = read_json(&dir.join("manifest.json"))?;
        if m.format_version != REGISTRY_FORMAT_VERSION || m.record_id != id || m.pooled_dim != POOLED_DIM {
            return Err(StoreError::Integrity(format!("record {id} manifest does not match the index")));
        }
        let expect = |name: &str, shape: Vec<usize>| -> Result<Vec<f32>, StoreError> {
            let a = m
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| StoreError::Integrity(format!("record {id} lacks array {name}")))?;
            if a.shape != shape {
                return Err(StoreError::Integrity(format!("array {name} has shape {:?}, expected {shape:?}", a.shape)));
            }
            read_f32(&dir.join(&a.file), shape.iter().product())
        };
        let c = expect("C", vec![m.k, m.d])?;
        let weight = expect("psi_w", vec![m.d, POOLED_DIM])?;
        let bias = expect("psi_b", vec![m.d])?;
        let record = SignatureRecord {
            record_id: m.record_id,
            signature: ReferenceSignature { k: m.k, d: m.d, c, psi: Psi { d: m.d, weight, bias }, seed: m.seed },
            watermark_digest: m.watermark_digest,
            extractor_checkpoint_id: m.extractor_checkpoint_id,
            created_at: m.created_at,
        };
        record.signature.validate().map_err(|e| StoreError::Integrity(e.to_string()))?;
        Ok(record)
    }

    pub fn ids(&self) -> Result<Vec<String>, StoreError> {
        Ok(self.index()?.entries.into_keys().collect())
    }
}
