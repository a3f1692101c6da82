//! Metrics and measurement harnesses: feature invariance, watermark
//! robustness, feature collapse and linear probing.

mod plots;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zwm_nn::{Adam, Param};

use crate::data::derive_seed;
use crate::distortions::{apply_distortion, DistortionError, DistortionSpec};
use crate::image::{batch_tensor, unbatch, Image};
use crate::zerowatermark::{extract_pooled, FrozenExtractor, SignatureRecord, WatermarkError, WatermarkMessage};

pub use plots::{plot_heatmap, plot_lines, Series};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no record for image {0}")]
    MissingRecord(String),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
    #[error(transparent)]
    Distortion(#[from] DistortionError),
    #[error("i/o error at {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::Io { path: path.to_path_buf(), message: e.to_string() }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_f32(a: &[f32], b: &[f32]) -> Result<f64, EvalError> {
    let w = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    cosine_similarity(&w(a), &w(b))
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    assert_eq!((a.height(), a.width()), (b.height(), b.width()), "mse shape mismatch");
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.data().len() as f64
}

/// `10 log10(1 / MSE)` for unit dynamic range; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    psnr_from_mse(mse(a, b))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// PSNR with the identical-image sentinel replaced by [`PSNR_CAP`].
pub fn psnr_capped(a: &Image, b: &Image) -> f64 {
    psnr(a, b).min(PSNR_CAP)
}

pub fn bit_error_rate(a: &WatermarkMessage, b: &WatermarkMessage) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    Ok(bit_errors(a, b) as f64 / a.len() as f64)
}

fn bit_errors(a: &WatermarkMessage, b: &WatermarkMessage) -> usize {
    a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count()
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub distortion: DistortionSpec,
    pub label: String,
    pub cosine_mean: Option<f64>,
    pub cosine_std: Option<f64>,
    pub psnr_mean: Option<f64>,
    pub psnr_std: Option<f64>,
    pub ber: Option<f64>,
    pub bit_accuracy: Option<f64>,
}

impl MetricsRow {
    fn new(spec: &DistortionSpec) -> Self {
        Self {
            distortion: spec.clone(),
            label: spec.distortion.label(),
            cosine_mean: None,
            cosine_std: None,
            psnr_mean: None,
            psnr_std: None,
            ber: None,
            bit_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub n_images: usize,
    pub n_bits_total: usize,
    pub extractor_checkpoint_id: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn row(&self, label: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("distortion,seed,cosine_mean,cosine_std,psnr_mean,psnr_std,ber,bit_accuracy\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.label,
                r.distortion.seed,
                f(r.cosine_mean),
                f(r.cosine_std),
                f(r.psnr_mean),
                f(r.psnr_std),
                f(r.ber),
                f(r.bit_accuracy)
            ));
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(io(&csv))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_vec_pretty(self).expect("serialisable report")).map_err(io(&json))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        serde_json::from_str(&text).map_err(|e| EvalError::Io { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Seed of run `run` for grid cell `cell`; deterministic kinds keep their own seed.
pub fn cell_seed(seed: u64, cell: usize, run: usize) -> u64 {
    derive_seed(&[seed, cell as u64, run as u64])
}

fn cell_spec(spec: &DistortionSpec, seed: u64, cell: usize, run: usize) -> DistortionSpec {
    if spec.distortion.is_stochastic() {
        spec.with_seed(cell_seed(seed, cell, run))
    } else {
        spec.clone()
    }
}

fn distort_all(images: &[&Image], spec: &DistortionSpec) -> Result<Vec<Image>, EvalError> {
    Ok(images.iter().map(|im| apply_distortion(im, spec)).collect::<Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub runs: usize,
    pub seed: u64,
    /// Also report PSNR of the reconstruction `R(FE(x'))` against `x`.
    pub with_psnr: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { runs: 1, seed: 0, with_psnr: true }
    }
}

/// Feature cosine between clean and distorted views (flattened spatial
/// features) and reconstruction PSNR, mean ± std over `runs` seeds.
pub fn invariance_sweep(
    fe: &FrozenExtractor,
    images: &[&Image],
    grid: &[DistortionSpec],
    opts: &SweepOptions,
) -> Result<MetricsReport, EvalError> {
    if images.is_empty() || opts.runs == 0 {
        return Err(EvalError::Precondition("invariance sweep needs ≥ 1 image and ≥ 1 run".into()));
    }
    let clean = fe.features(images)?;
    let mut r = fe.nets().r.clone();
    let mut rows = Vec::with_capacity(grid.len());
    for (cell, spec) in grid.iter().enumerate() {
        let mut cos_runs = Vec::with_capacity(opts.runs);
        let mut psnr_runs = Vec::with_capacity(opts.runs);
        for run in 0..opts.runs {
            let spec_r = cell_spec(spec, opts.seed, cell, run);
            let dist = distort_all(images, &spec_r)?;
            let dref: Vec<&Image> = dist.iter().collect();
            let feats = fe.features(&dref)?;
            let cos: Vec<f64> = clean.iter().zip(&feats).map(|(a, b)| cosine_f32(a, b)).collect::<Result<_, _>>()?;
            cos_runs.push(mean_std(&cos).0);
            if opts.with_psnr {
                let mut ps = Vec::with_capacity(images.len());
                for (chunk_f, chunk_x) in feats.chunks(16).zip(images.chunks(16)) {
                    let t = zwm_nn::Tensor::from_vec(
                        &[chunk_f.len(), crate::image::IMAGE_SIDE, crate::image::IMAGE_SIDE, 3],
                        chunk_f.concat(),
                    );
                    let (y, _) = r.forward(&t, false);
                    for (rec, x) in unbatch(&y).iter().zip(chunk_x) {
                        ps.push(psnr_capped(x, rec));
                    }
                }
                psnr_runs.push(mean_std(&ps).0);
            }
        }
        let mut row = MetricsRow::new(spec);
        let (m, s) = mean_std(&cos_runs);
        row.cosine_mean = Some(m);
        row.cosine_std = Some(s);
        if opts.with_psnr {
            let (m, s) = mean_std(&psnr_runs);
            row.psnr_mean = Some(m);
            row.psnr_std = Some(s);
        }
        rows.push(row);
    }
    Ok(MetricsReport {
        rows,
        n_images: images.len(),
        n_bits_total: 0,
        extractor_checkpoint_id: fe.checkpoint_id().to_string(),
        seed: opts.seed,
    })
}

/// One registered image: its record and the bits the caller expects back.
#[derive(Clone, Debug)]
pub struct RegisteredImage<'a> {
    pub name: String,
    pub image: &'a Image,
    pub record: Option<&'a SignatureRecord>,
    pub expected: &'a WatermarkMessage,
}

/// BER per distortion cell, aggregated over every bit of every image.
pub fn watermark_robustness_sweep(
    fe: &FrozenExtractor,
    items: &[RegisteredImage<'_>],
    grid: &[DistortionSpec],
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Precondition("robustness sweep needs ≥ 1 image".into()));
    }
    let records: Vec<&SignatureRecord> = items
        .iter()
        .map(|it| it.record.ok_or_else(|| EvalError::MissingRecord(it.name.clone())))
        .collect::<Result<_, _>>()?;
    let images: Vec<&Image> = items.iter().map(|it| it.image).collect();
    let n_bits: usize = items.iter().map(|it| it.expected.len()).sum();
    let mut rows = Vec::with_capacity(grid.len());
    for (cell, spec) in grid.iter().enumerate() {
        let spec_r = cell_spec(spec, seed, cell, 0);
        let dist = distort_all(&images, &spec_r)?;
        let dref: Vec<&Image> = dist.iter().collect();
        let pooled = fe.pooled(&dref)?;
        let mut errors = 0usize;
        for ((p, rec), it) in pooled.iter().zip(&records).zip(items) {
            if rec.extractor_checkpoint_id != fe.checkpoint_id() {
                return Err(WatermarkError::CheckpointMismatch {
                    expected: rec.extractor_checkpoint_id.clone(),
                    found: fe.checkpoint_id().to_string(),
                }
                .into());
            }
            let got = extract_pooled(p, &rec.signature).message;
            if got.len() != it.expected.len() {
                return Err(EvalError::LengthMismatch(got.len(), it.expected.len()));
            }
            errors += bit_errors(&got, it.expected);
        }
        let mut row = MetricsRow::new(&spec_r);
        let ber = errors as f64 / n_bits as f64;
        row.ber = Some(ber);
        row.bit_accuracy = Some((n_bits - errors) as f64 / n_bits as f64);
        rows.push(row);
    }
    Ok(MetricsReport {
        rows,
        n_images: items.len(),
        n_bits_total: n_bits,
        extractor_checkpoint_id: fe.checkpoint_id().to_string(),
        seed,
    })
}

/// Pairwise cosine matrix of flattened spatial features.
pub fn collapse_heatmap(fe: &FrozenExtractor, images: &[&Image]) -> Result<Vec<Vec<f64>>, EvalError> {
    if images.len() < 2 {
        return Err(EvalError::Precondition("heatmap needs ≥ 2 images".into()));
    }
    let feats = fe.features(images)?;
    let n = feats.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in i + 1..n {
            let c = cosine_f32(&feats[i], &feats[j])?;
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    s / (n * (n - 1)) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-2, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub top5: f64,
}

fn softmax(logits: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    logits.iter_mut().for_each(|v| *v /= z);
}

/// Multinomial logistic regression on frozen feature vectors, trained
/// full-batch with Adam; returns top-1/top-5 accuracy on the test split.
pub fn linear_probe(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    opts: &ProbeOptions,
) -> Result<ProbeResult, EvalError> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Precondition("probe needs non-empty splits".into()));
    }
    let dim = train[0].0.len();
    if train.iter().chain(test).any(|(f, _)| f.len() != dim) {
        return Err(EvalError::Precondition("probe features differ in length".into()));
    }
    let classes = train.iter().map(|(_, l)| l + 1).max().unwrap_or(0);
    let present: std::collections::BTreeSet<usize> = train.iter().map(|(_, l)| *l).collect();
    if let Some((_, l)) = test.iter().find(|(_, l)| !present.contains(l)) {
        return Err(EvalError::Precondition(format!("class {l} absent from the training split")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut w = Param::<f64>::new(
        &[classes, dim],
        (0..classes * dim).map(|_| rand::Rng::gen_range(&mut rng, -bound..bound)).collect(),
    );
    let mut b = Param::<f64>::zeros(&[classes]);
    let mut opt = Adam::new(opts.lr);
    let logits_of = |w: &[f64], b: &[f64], f: &[f64]| -> Vec<f64> {
        (0..classes).map(|c| b[c] + w[c * dim..(c + 1) * dim].iter().zip(f).map(|(a, x)| a * x).sum::<f64>()).collect()
    };
    let n = train.len() as f64;
    for _ in 0..opts.epochs {
        w.zero_grad();
        b.zero_grad();
        for (f, label) in train {
            let mut p = logits_of(&w.value, &b.value, f);
            softmax(&mut p);
            p[*label] -= 1.0;
            for c in 0..classes {
                let g = p[c] / n;
                b.grad[c] += g;
                for (gw, x) in w.grad[c * dim..(c + 1) * dim].iter_mut().zip(f) {
                    *gw += g * x;
                }
            }
        }
        opt.step(&mut [("w".into(), &mut w), ("b".into(), &mut b)]);
    }
    let (mut top1, mut top5) = (0usize, 0usize);
    for (f, label) in test {
        let s = logits_of(&w.value, &b.value, f);
        let rank = s.iter().filter(|&&v| v > s[*label]).count();
        top1 += (rank == 0) as usize;
        top5 += (rank < 5) as usize;
    }
    let m = test.len() as f64;
    Ok(ProbeResult { top1: top1 as f64 / m, top5: top5 as f64 / m })
}

/// Mean reconstruction PSNR `PSNR(x, R(FE(x)))` in inference mode.
pub fn reconstruction_psnr(fe: &FrozenExtractor, images: &[&Image]) -> Result<f64, EvalError> {
    let mut r = fe.nets().r.clone();
    let mut ps = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let f = fe.nets().fe.extract(&batch_tensor::<f32>(chunk)).map_err(WatermarkError::from)?;
        let (y, _) = r.forward(&f, false);
        for (rec, x) in unbatch(&y).iter().zip(chunk) {
            ps.push(psnr_capped(x, rec));
        }
    }
    Ok(mean_std(&ps).0)
}

/// Writes one pooled feature vector per line (`name,v0,v1,…`) for external embedding tools.
pub fn export_embeddings(path: &Path, names: &[String], feats: &[Vec<f64>]) -> Result<(), EvalError> {
    let mut s = String::new();
    for (n, f) in names.iter().zip(feats) {
        s.push_str(n);
        for v in f {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(io(path))
}
