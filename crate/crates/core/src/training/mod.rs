//! Three-player noise-adversarial training of the feature extractor.
//!
//! Each batch runs, in order, a discriminator step on clean (label 1) versus
//! distorted (label 0) features, an extractor step on
//! `λ_D · L_adv + L_R(x, R(F_c)) + L_R(x, R(F_d))`, and a reconstructor step
//! on the same reconstruction loss.

mod losses;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zwm_nn::{clip_grad_norm, Adam, Module, Real, Tensor};

use crate::data::derive_seed;
use crate::distortions::{apply_distortion, sample_training_distortion, DistortionError};
use crate::image::{batch_tensor, Image, IMAGE_SIDE};
use crate::models::{Discriminator, ModelConfig, ModelError, Nets};
use crate::store::{load_checkpoint, save_checkpoint, AdamState, Checkpoint, StoreError};

pub use losses::{
    adversarial_from_logits, discriminator_from_logits, loss_adversarial, loss_discriminator, loss_reconstruction,
    reconstruction_value_grad, ssim, ssim_grad, PROB_CLAMP, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};

pub const LOSS_LOG: &str = "losses.csv";
pub const LOSS_HEADER: &str = "step,l_d,l_adv,l_r,l_fe";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {loss} at step {step}")]
    NonFinite { step: u64, loss: &'static str },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distortion(#[from] DistortionError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] StoreError),
    #[error("loss log {path}: {source}")]
    Log { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lr_fe: f64,
    pub lr_d: f64,
    pub lr_r: f64,
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub checkpoint_every: u32,
    pub seed: u64,
    /// Ablation switch: drop the reconstruction term and the reconstructor step.
    pub use_reconstructor: bool,
    /// Ablation switch: drop the adversarial term and the discriminator step.
    pub use_adversarial: bool,
    pub clip_norm: f64,
    pub model: ModelConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr_fe: 5e-4,
            lr_d: 1e-3,
            lr_r: 1e-4,
            lambda_s: 0.5,
            lambda_m: 0.5,
            lambda_d: 0.1,
            batch_size: 16,
            epochs: 20,
            checkpoint_every: 10,
            seed: 0,
            use_reconstructor: true,
            use_adversarial: true,
            clip_norm: 5.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        for (name, lr) in [("lr_fe", self.lr_fe), ("lr_d", self.lr_d), ("lr_r", self.lr_r)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return err(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, w) in [("lambda_s", self.lambda_s), ("lambda_m", self.lambda_m), ("lambda_d", self.lambda_d)] {
            if !(w >= 0.0 && w.is_finite()) {
                return err(format!("{name} must be non-negative, got {w}"));
            }
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return err("batch_size and checkpoint_every must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return err(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Losses of one batch; disabled terms are logged as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_d: f64,
    pub l_adv: f64,
    pub l_r: f64,
    pub l_fe: f64,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_d, self.l_adv, self.l_r, self.l_fe)
    }
}

/// Networks, per-component optimizers and the position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainingConfig,
    pub nets: Nets<f32>,
    pub opt_fe: Adam,
    pub opt_d: Adam,
    pub opt_r: Adam,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed batches.
    pub step: u64,
}

fn check(step: u64, loss: &'static str, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite { step, loss })
    }
}

impl Trainer {
    pub fn new(cfg: TrainingConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let nets = Nets::new(&cfg.model, cfg.seed)?;
        Ok(Self::with_nets(cfg, nets))
    }

    pub fn with_nets(cfg: TrainingConfig, nets: Nets<f32>) -> Self {
        Self {
            opt_fe: Adam::new(cfg.lr_fe),
            opt_d: Adam::new(cfg.lr_d),
            opt_r: Adam::new(cfg.lr_r),
            cfg,
            nets,
            epoch: 0,
            step: 0,
        }
    }

    /// Restores networks, optimizer moments and schedule position.
    pub fn from_checkpoint(ckpt: Checkpoint, cfg: TrainingConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if ckpt.manifest.model != cfg.model {
            return Err(TrainError::Config("checkpoint architecture differs from configuration".into()));
        }
        let mut t = Self::with_nets(cfg, ckpt.nets);
        t.epoch = ckpt.manifest.epoch;
        t.step = ckpt.manifest.step;
        for (name, opt) in [("fe", &mut t.opt_fe), ("d", &mut t.opt_d), ("r", &mut t.opt_r)] {
            if let Some(st) = ckpt.optimizer.get(name) {
                opt.restore(st.step, st.m.clone(), st.v.clone());
            }
        }
        Ok(t)
    }

    pub fn optimizer_state(&self) -> BTreeMap<String, AdamState> {
        [("fe", &self.opt_fe), ("d", &self.opt_d), ("r", &self.opt_r)]
            .into_iter()
            .filter(|(_, o)| o.steps() > 0)
            .map(|(name, o)| {
                let (step, m, v) = o.state();
                (name.to_string(), AdamState { step, m: m.to_vec(), v: v.to_vec() })
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), StoreError> {
        save_checkpoint(dir, &self.nets, Some(&self.cfg), self.epoch, self.step, self.cfg.seed, &self.optimizer_state())
            .map(|_| ())
    }

    /// Training distortion for image `i` of batch `batch` in `epoch`.
    pub fn distortion_seed(&self, epoch: u32, batch: usize, i: usize) -> u64 {
        derive_seed(&[self.cfg.seed, epoch as u64, batch as u64, i as u64])
    }

    /// Index order of `epoch` (0-based) over `n` images.
    pub fn epoch_order(&self, epoch: u32, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, epoch as u64])));
        order
    }

    /// One full update on a batch of clean images and their distorted views.
    pub fn train_step(&mut self, clean: &[&Image], distorted: &[&Image]) -> Result<LossRecord, TrainError> {
        self.train_step_observed(clean, distorted, &mut |_, _| {})
    }

    /// [`train_step`](Self::train_step) calling `observe` after each of the three updates.
    pub fn train_step_observed(
        &mut self,
        clean: &[&Image],
        distorted: &[&Image],
        observe: &mut dyn FnMut(StepPhase, &Nets<f32>),
    ) -> Result<LossRecord, TrainError> {
        let b = check_halves(clean, distorted)?;
        let step = self.step + 1;
        let cfg = self.cfg.clone();
        let x = batch_tensor::<f32>(clean);
        let xd = batch_tensor::<f32>(distorted);
        let (feats, fe_cache) = self.nets.fe.forward(&Tensor::concat0(&[&x, &xd]))?;

        let mut l_d = 0.0;
        if cfg.use_adversarial {
            self.nets.d.zero_grad();
            l_d = discriminator_objective(&mut self.nets.d, &feats, b, step)?;
            clip_grad_norm(&mut self.nets.d.named_params_mut(), cfg.clip_norm);
            self.opt_d.step(&mut self.nets.d.named_params_mut());
        }
        observe(StepPhase::Discriminator, &self.nets);

        let (l_adv, l_r, dfeat) = extractor_objective(&mut self.nets, &feats, &x, b, &cfg, step)?;
        let l_fe = check(step, "l_fe", cfg.lambda_d * l_adv + l_r)?;
        if cfg.use_adversarial || cfg.use_reconstructor {
            self.nets.fe.zero_grad();
            self.nets.fe.backward(&fe_cache, &dfeat);
            clip_grad_norm(&mut self.nets.fe.named_params_mut(), cfg.clip_norm);
            self.opt_fe.step(&mut self.nets.fe.named_params_mut());
        }
        observe(StepPhase::Extractor, &self.nets);

        // The reconstructor gradient of L_R at the pre-update features and
        // unchanged θ_R is exactly what the extractor pass accumulated.
        if cfg.use_reconstructor {
            clip_grad_norm(&mut self.nets.r.named_params_mut(), cfg.clip_norm);
            self.opt_r.step(&mut self.nets.r.named_params_mut());
        }
        observe(StepPhase::Reconstructor, &self.nets);
        self.step = step;
        Ok(LossRecord { step, l_d, l_adv, l_r, l_fe })
    }

    /// Discriminator update alone, the extractor held fixed.
    pub fn discriminator_step(&mut self, clean: &[&Image], distorted: &[&Image]) -> Result<f64, TrainError> {
        let b = check_halves(clean, distorted)?;
        let both = Tensor::concat0(&[&batch_tensor::<f32>(clean), &batch_tensor::<f32>(distorted)]);
        let feats = self.nets.fe.extract(&both)?;
        self.nets.d.zero_grad();
        let l_d = discriminator_objective(&mut self.nets.d, &feats, b, self.step + 1)?;
        clip_grad_norm(&mut self.nets.d.named_params_mut(), self.cfg.clip_norm);
        self.opt_d.step(&mut self.nets.d.named_params_mut());
        self.step += 1;
        Ok(l_d)
    }

    /// Extractor update on `λ_D · L_adv` alone with the discriminator held fixed.
    pub fn adversarial_fe_step(&mut self, distorted: &[&Image]) -> Result<f64, TrainError> {
        let xd = batch_tensor::<f32>(distorted);
        let (feats, fe_cache) = self.nets.fe.forward(&xd)?;
        let (logits, cache) = self.nets.d.forward(&feats)?;
        let (loss, g) = adversarial_from_logits(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let loss = check(self.step + 1, "l_adv", loss)?;
        let g: Vec<f32> = g.iter().map(|&v| (v * self.cfg.lambda_d) as f32).collect();
        let df = self.nets.d.backward(&cache, &g);
        self.nets.d.zero_grad();
        self.nets.fe.zero_grad();
        self.nets.fe.backward(&fe_cache, &df);
        clip_grad_norm(&mut self.nets.fe.named_params_mut(), self.cfg.clip_norm);
        self.opt_fe.step(&mut self.nets.fe.named_params_mut());
        self.step += 1;
        Ok(loss)
    }

    /// One pass over `data` in a seeded order; the trailing partial batch is dropped.
    pub fn train_epoch(&mut self, data: &[Image]) -> Result<Vec<LossRecord>, TrainError> {
        let bs = self.cfg.batch_size;
        if data.len() < bs {
            return Err(TrainError::Precondition(format!(
                "dataset of {} images is smaller than batch size {bs}",
                data.len()
            )));
        }
        let epoch = self.epoch;
        let order = self.epoch_order(epoch, data.len());
        let mut records = Vec::with_capacity(data.len() / bs);
        for (bi, idx) in order.chunks_exact(bs).enumerate() {
            let clean: Vec<&Image> = idx.iter().map(|&i| &data[i]).collect();
            let distorted = clean
                .iter()
                .enumerate()
                .map(|(i, img)| apply_distortion(img, &sample_training_distortion(self.distortion_seed(epoch, bi, i))))
                .collect::<Result<Vec<_>, _>>()?;
            let dref: Vec<&Image> = distorted.iter().collect();
            let rec = self.train_step(&clean, &dref)?;
            log::debug!(
                "epoch {} step {} l_d {:.4} l_adv {:.4} l_r {:.4}",
                epoch + 1,
                rec.step,
                rec.l_d,
                rec.l_adv,
                rec.l_r
            );
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }
}

/// Update stages of one training step, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepPhase {
    Discriminator,
    Extractor,
    Reconstructor,
}

fn check_halves(clean: &[&Image], distorted: &[&Image]) -> Result<usize, TrainError> {
    if clean.is_empty() || distorted.len() != clean.len() {
        return Err(TrainError::Precondition(format!(
            "batch needs matching non-empty halves, got {} and {}",
            clean.len(),
            distorted.len()
        )));
    }
    Ok(clean.len())
}

/// `L_D` on `feats = [F_c; F_d]`; accumulates discriminator gradients.
fn discriminator_objective<T: Real>(
    d: &mut Discriminator<T>,
    feats: &Tensor<T>,
    b: usize,
    step: u64,
) -> Result<f64, TrainError> {
    let (logits, cache) = d.forward(feats)?;
    let l: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let (loss, gc, gd) = discriminator_from_logits(&l[..b], &l[b..]);
    let loss = check(step, "l_d", loss)?;
    let g: Vec<T> = gc.iter().chain(&gd).map(|&v| T::of(v)).collect();
    d.backward(&cache, &g);
    Ok(loss)
}

/// `(L_adv, L_R, dL_FE/dF)` on `feats = [F_c; F_d]` with clean targets `x`.
/// Accumulates reconstructor gradients of `L_R`; leaves discriminator
/// gradients zeroed.
fn extractor_objective<T: Real>(
    nets: &mut Nets<T>,
    feats: &Tensor<T>,
    x: &Tensor<T>,
    b: usize,
    cfg: &TrainingConfig,
    step: u64,
) -> Result<(f64, f64, Tensor<T>), TrainError> {
    let mut dfeat = vec![T::zero(); feats.len()];
    let mut l_adv = 0.0;
    if cfg.use_adversarial {
        let (_, f_dist) = feats.split0(b);
        let (logits, cache) = nets.d.forward(&f_dist)?;
        let l: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        let (loss, g) = adversarial_from_logits(&l);
        l_adv = check(step, "l_adv", loss)?;
        let g: Vec<T> = g.iter().map(|&v| T::of(v * cfg.lambda_d)).collect();
        let df = nets.d.backward(&cache, &g);
        let off = feats.len() - df.len();
        for (a, &v) in dfeat[off..].iter_mut().zip(df.data()) {
            *a += v;
        }
        // this pass only routes gradient into the features
        nets.d.zero_grad();
    }
    let mut l_r = 0.0;
    if cfg.use_reconstructor {
        nets.r.zero_grad();
        let (y, cache) = nets.r.forward(feats, true);
        let per = IMAGE_SIDE * IMAGE_SIDE * 3;
        let mut dy = vec![T::zero(); y.len()];
        let mut total = 0.0;
        for j in 0..2 * b {
            let target = &x.data()[(j % b) * per..(j % b + 1) * per];
            let pred = &y.data()[j * per..(j + 1) * per];
            let (loss, g) =
                reconstruction_value_grad(target, pred, IMAGE_SIDE, IMAGE_SIDE, cfg.lambda_s, cfg.lambda_m, true);
            total += loss / b as f64;
            for (d, gv) in dy[j * per..(j + 1) * per].iter_mut().zip(g) {
                *d = T::of(gv / b as f64);
            }
        }
        l_r = check(step, "l_r", total)?;
        let df = nets.r.backward(&cache, &Tensor::from_vec(y.shape(), dy));
        for (a, &v) in dfeat.iter_mut().zip(df.data()) {
            *a += v;
        }
    }
    Ok((l_adv, l_r, Tensor::from_vec(feats.shape(), dfeat)))
}

/// All three losses of one batch at fixed parameters. Each loss's gradient
/// is left in the parameters it trains: `L_D` in the discriminator, `L_FE`
/// in the extractor, `L_R` in the reconstructor.
pub fn batch_objectives<T: Real>(
    nets: &mut Nets<T>,
    clean: &Tensor<T>,
    distorted: &Tensor<T>,
    cfg: &TrainingConfig,
) -> Result<LossRecord, TrainError> {
    let b = clean.shape()[0];
    let (feats, fe_cache) = nets.fe.forward(&Tensor::concat0(&[clean, distorted]))?;
    let (l_adv, l_r, dfeat) = extractor_objective(nets, &feats, clean, b, cfg, 0)?;
    nets.fe.zero_grad();
    nets.fe.backward(&fe_cache, &dfeat);
    nets.d.zero_grad();
    let l_d = if cfg.use_adversarial { discriminator_objective(&mut nets.d, &feats, b, 0)? } else { 0.0 };
    Ok(LossRecord { step: 0, l_d, l_adv, l_r, l_fe: cfg.lambda_d * l_adv + l_r })
}

/// Directory of the checkpoint written after `epoch`.
pub fn checkpoint_dir(out: &Path, epoch: u32) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

/// Epochs after which `fit` writes a checkpoint.
pub fn checkpoint_epochs(cfg: &TrainingConfig) -> Vec<u32> {
    let mut v: Vec<u32> = (1..=cfg.epochs).filter(|e| e % cfg.checkpoint_every == 0).collect();
    if cfg.epochs > 0 && v.last() != Some(&cfg.epochs) {
        v.push(cfg.epochs);
    }
    v
}

/// Latest checkpoint under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("epoch_")) && p.join("manifest.json").exists()
        })
        .collect();
    dirs.sort();
    dirs.pop()
}

/// Resumes from the latest checkpoint in `out`, or starts fresh.
pub fn trainer_for(cfg: TrainingConfig, out: &Path) -> Result<Trainer, TrainError> {
    match latest_checkpoint(out) {
        Some(dir) => {
            let t = Trainer::from_checkpoint(load_checkpoint(&dir)?, cfg)?;
            log::info!("resuming from {} (epoch {})", dir.display(), t.epoch);
            Ok(t)
        }
        None => Trainer::new(cfg),
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub records: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn log_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Log { path: path.to_path_buf(), source }
}

/// Drops log rows past `step` so a resumed run does not duplicate them.
fn prepare_log(path: &Path, step: u64) -> Result<(), TrainError> {
    let kept: Vec<String> = match fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
            .map(str::to_string)
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(log_err(path)(e)),
    };
    let mut text = String::from(LOSS_HEADER);
    text.push('\n');
    for l in kept {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).map_err(log_err(path))
}

/// Trains `trainer` up to `cfg.epochs`, appending to `out/losses.csv` and
/// checkpointing every `checkpoint_every` epochs plus after the last one.
/// On error the trainer keeps its in-memory state.
pub fn fit(trainer: &mut Trainer, data: &[Image], out: &Path) -> Result<FitReport, TrainError> {
    if data.len() < trainer.cfg.batch_size {
        return Err(TrainError::Precondition(format!(
            "dataset of {} images is smaller than batch size {}",
            data.len(),
            trainer.cfg.batch_size
        )));
    }
    fs::create_dir_all(out).map_err(log_err(out))?;
    let log_path = out.join(LOSS_LOG);
    prepare_log(&log_path, trainer.step)?;
    let marks = checkpoint_epochs(&trainer.cfg);
    let mut report = FitReport::default();
    while trainer.epoch < trainer.cfg.epochs {
        let records = trainer.train_epoch(data)?;
        let mut f = OpenOptions::new().append(true).open(&log_path).map_err(log_err(&log_path))?;
        for r in &records {
            writeln!(f, "{}", r.csv_row()).map_err(log_err(&log_path))?;
        }
        let mean = records.iter().map(|r| r.l_r).sum::<f64>() / records.len() as f64;
        log::info!("epoch {}/{} mean l_r {:.4}", trainer.epoch, trainer.cfg.epochs, mean);
        report.records.extend(records);
        if marks.contains(&trainer.epoch) {
            let dir = checkpoint_dir(out, trainer.epoch);
            trainer.save(&dir)?;
            report.checkpoints.push(dir);
        }
    }
    Ok(report)
}

/// Reads a loss log back.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(log_err(path))?;
    let bad = |l: &str| TrainError::Log {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad row {l:?}")),
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<&str> = l.split(',').collect();
            if v.len() != 5 {
                return Err(bad(l));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            Ok(LossRecord {
                step: v[0].parse().map_err(|_| bad(l))?,
                l_d: f(v[1])?,
                l_adv: f(v[2])?,
                l_r: f(v[3])?,
                l_fe: f(v[4])?,
            })
        })
        .collect()
}
