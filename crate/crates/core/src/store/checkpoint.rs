use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zwm_nn::Module;

use super::{io_err, read_f32, read_f64, read_json, to_json, write_f32, write_f64, StoreError};
use crate::models::{ModelConfig, Nets};
use crate::training::TrainingConfig;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub checkpoint_id: String,
    pub model: ModelConfig,
    pub training: Option<TrainingConfig>,
    pub epoch: u32,
    pub step: u64,
    pub seed: u64,
    pub num_params: usize,
    pub tensors: Vec<TensorEntry>,
    /// Adam moment buffers (`f64`), keyed `<group>.m.<i>` / `<group>.v.<i>`.
    #[serde(default)]
    pub optimizer: Vec<TensorEntry>,
    #[serde(default)]
    pub optimizer_steps: BTreeMap<String, u64>,
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub nets: Nets<f32>,
    /// Optimizer state per group (`fe`, `d`, `r`) when saved by the trainer.
    pub optimizer: BTreeMap<String, AdamState>,
}

/// Content hash of the feature-extractor tensors (names, shapes and bits).
pub fn checkpoint_id(nets: &Nets<f32>) -> String {
    let mut h = Sha256::new();
    for (name, p) in nets.fe.named_params() {
        h.update(name.as_bytes());
        for s in &p.shape {
            h.update((*s as u64).to_le_bytes());
        }
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// Writes a checkpoint directory atomically (temp directory, then rename).
pub fn save_checkpoint(
    dir: &Path,
    nets: &Nets<f32>,
    training: Option<&TrainingConfig>,
    epoch: u32,
    step: u64,
    seed: u64,
    optimizer: &BTreeMap<String, AdamState>,
) -> Result<CheckpointManifest, StoreError> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
    let mut tensors = Vec::new();
    for (pname, p) in nets.named_params() {
        let file = format!("{pname}.f32");
        write_f32(&tmp.join(&file), &p.value)?;
        tensors.push(TensorEntry { name: pname, shape: p.shape.clone(), file });
    }
    let mut opt_entries = Vec::new();
    let mut steps = BTreeMap::new();
    for (group, st) in optimizer {
        steps.insert(group.clone(), st.step);
        for (kind, bufs) in [("m", &st.m), ("v", &st.v)] {
            for (i, b) in bufs.iter().enumerate() {
                let oname = format!("{group}.{kind}.{i}");
                let file = format!("optim.{oname}.f64");
                write_f64(&tmp.join(&file), b)?;
                opt_entries.push(TensorEntry { name: oname, shape: vec![b.len()], file });
            }
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        checkpoint_id: checkpoint_id(nets),
        model: nets.cfg.clone(),
        training: training.cloned(),
        epoch,
        step,
        seed,
        num_params: nets.num_params(),
        tensors,
        optimizer: opt_entries,
        optimizer_steps: steps,
    };
    fs::write(tmp.join("manifest.json"), to_json(&manifest)).map_err(io_err(&tmp))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, StoreError> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(StoreError::Integrity(format!("unsupported checkpoint version {}", manifest.format_version)));
    }
    let mut nets = Nets::<f32>::new(&manifest.model, 0).map_err(|e| StoreError::Integrity(e.to_string()))?;
    let by_name: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut params = nets.named_params_mut();
    if params.len() != by_name.len() {
        return Err(StoreError::Integrity(format!(
            "checkpoint lists {} tensors, architecture has {}",
            by_name.len(),
            params.len()
        )));
    }
    for (pname, p) in params.iter_mut() {
        let entry = by_name
            .get(pname.as_str())
            .ok_or_else(|| StoreError::Integrity(format!("tensor {pname} missing from checkpoint")))?;
        if entry.shape != p.shape {
            return Err(StoreError::Integrity(format!(
                "tensor {pname} has shape {:?}, expected {:?}",
                entry.shape, p.shape
            )));
        }
        p.value = read_f32(&dir.join(&entry.file), p.len())?;
    }
    drop(params);
    let id = checkpoint_id(&nets);
    if id != manifest.checkpoint_id {
        return Err(StoreError::Integrity(format!(
            "checkpoint id {} does not match contents ({id})",
            manifest.checkpoint_id
        )));
    }
    let mut optimizer: BTreeMap<String, AdamState> = BTreeMap::new();
    for (group, &step) in &manifest.optimizer_steps {
        optimizer.insert(group.clone(), AdamState { step, ..Default::default() });
    }
    for e in &manifest.optimizer {
        let mut parts = e.name.splitn(3, '.');
        let (group, kind) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
        let st = optimizer
            .get_mut(group)
            .ok_or_else(|| StoreError::Integrity(format!("optimizer buffer {} has no group", e.name)))?;
        let len = e.shape.first().copied().unwrap_or(0);
        let buf = read_f64(&dir.join(&e.file), len)?;
        match kind {
            "m" => st.m.push(buf),
            "v" => st.v.push(buf),
            _ => return Err(StoreError::Integrity(format!("unknown optimizer buffer {}", e.name))),
        }
    }
    Ok(Checkpoint { manifest, nets, optimizer })
}
