mod common;

use std::fs;

use common::tiny_cfg;
use zwm_core::data::synth_dataset;
use zwm_core::image::Image;
use zwm_core::models::Nets;
use zwm_core::store::*;
use zwm_core::training::{Trainer, TrainingConfig};
use zwm_core::zerowatermark::{register, FrozenExtractor, RegisterOptions, SignatureRecord, WatermarkMessage};
use zwm_nn::Module;

fn trained() -> Trainer {
    let cfg = TrainingConfig { batch_size: 2, epochs: 1, model: tiny_cfg(), seed: 5, ..Default::default() };
    let data: Vec<Image> = synth_dataset(2, 1).into_iter().map(|l| l.image).collect();
    let mut t = Trainer::new(cfg).unwrap();
    t.train_epoch(&data).unwrap();
    t
}

fn bits<M: Module<f32>>(m: &M) -> Vec<(String, Vec<u32>)> {
    m.named_params().into_iter().map(|(n, p)| (n, p.value.iter().map(|v| v.to_bits()).collect())).collect()
}

fn record(seed: u64) -> SignatureRecord {
    let fe = FrozenExtractor::new(Nets::<f32>::new(&tiny_cfg(), 2).unwrap());
    let img = synth_dataset(1, 40 + seed).remove(0).image;
    let opts = RegisterOptions { d: 16, seed, ..Default::default() };
    register(&fe, &img, &WatermarkMessage::random(30, seed), &opts).unwrap().0
}

#[test]
fn checkpoint_round_trips_every_tensor_and_optimizer_state() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    t.save(&path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    // running statistics are part of named_params and must survive too
    assert!(bits(&ck.nets).iter().any(|(n, _)| n.contains("running")), "no batch-norm buffers found");
    assert_eq!(bits(&ck.nets), bits(&t.nets));
    assert_eq!(ck.optimizer, t.optimizer_state());
    assert_eq!(ck.manifest.step, 1);
    assert_eq!(ck.manifest.epoch, 1);
    assert_eq!(ck.manifest.checkpoint_id, checkpoint_id(&t.nets));
    assert_eq!(ck.manifest.num_params, t.nets.num_params());
}

#[test]
fn corrupted_tensor_is_an_integrity_error() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    t.save(&path).unwrap();
    let m: CheckpointManifest = serde_json::from_slice(&fs::read(path.join("manifest.json")).unwrap()).unwrap();
    let fe = m.tensors.iter().find(|e| e.name.starts_with("fe.")).unwrap();
    let mut bytes = fs::read(path.join(&fe.file)).unwrap();
    bytes[0] ^= 0xff;
    fs::write(path.join(&fe.file), &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(StoreError::Integrity(_))));
    bytes.pop();
    fs::write(path.join(&fe.file), &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(StoreError::Integrity(_))));
}

#[test]
fn checkpoint_id_tracks_extractor_contents_only() {
    let mut nets = Nets::<f32>::new(&tiny_cfg(), 1).unwrap();
    let id = checkpoint_id(&nets);
    assert_eq!(id.len(), 16);
    nets.d.named_params_mut()[0].1.value[0] += 1.0;
    assert_eq!(checkpoint_id(&nets), id);
    nets.fe.named_params_mut()[0].1.value[0] += 1.0;
    assert_ne!(checkpoint_id(&nets), id);
}

#[test]
fn registry_put_get_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let rec = record(1);
    let id = reg.put(&rec).unwrap();
    assert_eq!(id, rec.record_id);
    let back = reg.get(&id).unwrap();
    assert_eq!(back, rec);
    assert_eq!(reg.ids().unwrap(), vec![id.clone()]);
    let entry = &reg.index().unwrap().entries[&id];
    assert_eq!(entry.watermark_digest, rec.watermark_digest);
    assert_eq!(entry.checkpoint_id, rec.extractor_checkpoint_id);
}

#[test]
fn duplicate_put_conflicts_and_keeps_the_original() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let rec = record(2);
    reg.put(&rec).unwrap();
    let mut other = record(3);
    other.record_id = rec.record_id.clone();
    assert!(matches!(reg.put(&other), Err(StoreError::Conflict(_))));
    assert_eq!(reg.get(&rec.record_id).unwrap(), rec);
}

#[test]
fn failure_before_index_rename_leaves_index_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut reg = Registry::open(dir.path()).unwrap();
    let first = record(4);
    reg.put(&first).unwrap();
    let before = fs::read(dir.path().join("index.json")).unwrap();
    let rec = record(5);
    reg.set_failpoint(Some("before_index_rename"));
    assert!(matches!(reg.put(&rec), Err(StoreError::Injected(_))));
    assert_eq!(fs::read(dir.path().join("index.json")).unwrap(), before);
    assert!(matches!(reg.get(&rec.record_id), Err(StoreError::NotFound(_))));
    reg.set_failpoint(None);
    reg.put(&rec).unwrap();
    assert_eq!(reg.get(&rec.record_id).unwrap(), rec);
    assert_eq!(reg.get(&first.record_id).unwrap(), first);
}

#[test]
fn truncated_blob_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let rec = record(6);
    reg.put(&rec).unwrap();
    let blob = dir.path().join("records").join(&rec.record_id).join("C.f32");
    let mut bytes = fs::read(&blob).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&blob, bytes).unwrap();
    assert!(matches!(reg.get(&rec.record_id), Err(StoreError::Integrity(_))));
}

#[test]
fn unknown_id_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    assert!(matches!(reg.get("0123456789abcdef"), Err(StoreError::NotFound(_))));
}

#[test]
fn held_lock_blocks_writers_but_not_readers() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let rec = record(7);
    reg.put(&rec).unwrap();
    fs::write(dir.path().join(".lock"), b"").unwrap();
    assert!(matches!(reg.put(&record(8)), Err(StoreError::Locked(_))));
    assert_eq!(reg.get(&rec.record_id).unwrap(), rec);
    fs::remove_file(dir.path().join(".lock")).unwrap();
    reg.put(&record(8)).unwrap();
}

#[test]
fn invalid_record_id_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let mut rec = record(9);
    rec.record_id = "../escape".into();
    assert!(matches!(reg.put(&rec), Err(StoreError::Integrity(_))));
}

#[test]
fn experiment_config_checks_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    let data = dir.path().join("data");
    fs::write(&path, format!(r#"{{"data_dir": "{}", "output_dir": "out"}}"#, data.display())).unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(StoreError::Config(_))));
    fs::create_dir(&data).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.watermark_bits, 30);
    assert_eq!(cfg.training, TrainingConfig::default());
    fs::write(&path, "{").unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
}
