//! Multibit zero-watermarking in the invariant feature space.
//!
//! A record pairs one image with one message through a signature matrix `C`
//! (k×d) and a per-record projection Ψ (16×16 tile pooling, then affine map
//! to d). Nothing about the image itself is modified or stored.

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zwm_nn::{Adam, Param};

use crate::image::{batch_tensor, Image, IMAGE_SIDE};
use crate::models::{ModelError, Nets};
use crate::store::checkpoint_id;

pub const DEFAULT_BITS: usize = 30;
pub const DEFAULT_PROJ_DIM: usize = 256;
pub const POOL_TILE: usize = 16;
pub const POOL_GRID: usize = IMAGE_SIDE / POOL_TILE;
/// Pooled feature length: 8×8 tiles × 3 channels.
pub const POOLED_DIM: usize = POOL_GRID * POOL_GRID * 3;
pub const WM_PROB_CLAMP: f64 = 1e-7;
/// Images per extractor forward pass when featurising many images.
const FEATURE_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum WatermarkError {
    #[error("registration did not reach full clean accuracy (final accuracy {accuracy:.4})")]
    Convergence { accuracy: f64 },
    #[error("record was registered under extractor {expected}, got {found}")]
    CheckpointMismatch { expected: String, found: String },
    #[error("invalid watermark message: {0}")]
    Message(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A length-k bit vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WatermarkMessage {
    bits: Vec<bool>,
}

impl WatermarkMessage {
    pub fn new(bits: Vec<bool>) -> Result<Self, WatermarkError> {
        if bits.is_empty() {
            return Err(WatermarkError::Message("watermark must hold at least one bit".into()));
        }
        Ok(Self { bits })
    }

    pub fn random(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { bits: (0..k.max(1)).map(|_| rng.gen_bool(0.5)).collect() }
    }

    pub fn zeros(k: usize) -> Self {
        Self { bits: vec![false; k.max(1)] }
    }

    pub fn ones(k: usize) -> Self {
        Self { bits: vec![true; k.max(1)] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Big-endian hex: the first bit is the most significant, padded on the left
    /// to a whole number of nibbles.
    pub fn to_hex(&self) -> String {
        let nibbles = self.bits.len().div_ceil(4);
        let pad = nibbles * 4 - self.bits.len();
        let padded: Vec<bool> = std::iter::repeat(false).take(pad).chain(self.bits.iter().copied()).collect();
        padded
            .chunks(4)
            .map(|c| {
                let v = c.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    /// Inverse of [`to_hex`](Self::to_hex); accepts an optional `0x` prefix.
    pub fn from_hex(hex: &str, k: usize) -> Result<Self, WatermarkError> {
        if k == 0 {
            return Err(WatermarkError::Message("k must be positive".into()));
        }
        let s = hex.trim();
        let s = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
        let nibbles = k.div_ceil(4);
        if s.len() != nibbles {
            return Err(WatermarkError::Message(format!(
                "{k}-bit message needs {nibbles} hex digits, got {}",
                s.len()
            )));
        }
        let mut bits = Vec::with_capacity(nibbles * 4);
        for ch in s.chars() {
            let v = ch.to_digit(16).ok_or_else(|| WatermarkError::Message(format!("invalid hex digit {ch:?}")))?;
            bits.extend((0..4).rev().map(|i| (v >> i) & 1 == 1));
        }
        let pad = nibbles * 4 - k;
        if bits[..pad].iter().any(|&b| b) {
            return Err(WatermarkError::Message(format!("value does not fit in {k} bits")));
        }
        Self::new(bits[pad..].to_vec())
    }

    /// SHA-256 over the length and bit string; fixed 64 hex characters.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.bits.len() as u64).to_le_bytes());
        h.update(self.bits.iter().map(|&b| b as u8).collect::<Vec<_>>());
        hex::encode(h.finalize())
    }
}

/// Per-record projection Ψ: tile pooling then `W p + b`, `W` stored `(d, 192)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Psi {
    pub d: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Psi {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (POOLED_DIM as f32).sqrt();
        Self { d, weight: (0..d * POOLED_DIM).map(|_| rng.gen_range(-bound..bound)).collect(), bias: vec![0.0; d] }
    }

    /// Affine map of an already pooled feature.
    pub fn apply(&self, pooled: &[f64]) -> Vec<f64> {
        affine(&to64(&self.weight), &to64(&self.bias), pooled)
    }
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn affine(w: &[f64], b: &[f64], p: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(j, &bj)| bj + w[j * p.len()..(j + 1) * p.len()].iter().zip(p).map(|(a, x)| a * x).sum::<f64>())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSignature {
    pub k: usize,
    pub d: usize,
    /// `(k, d)` row-major.
    pub c: Vec<f32>,
    pub psi: Psi,
    pub seed: u64,
}

impl ReferenceSignature {
    pub fn validate(&self) -> Result<(), WatermarkError> {
        let ok = self.c.len() == self.k * self.d
            && self.psi.d == self.d
            && self.psi.weight.len() == self.d * POOLED_DIM
            && self.psi.bias.len() == self.d;
        if !ok {
            return Err(WatermarkError::Shape(format!("signature arrays do not match k={} d={}", self.k, self.d)));
        }
        if !self.c.iter().chain(&self.psi.weight).chain(&self.psi.bias).all(|v| v.is_finite()) {
            return Err(WatermarkError::Shape("signature holds non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignatureRecord {
    pub record_id: String,
    pub signature: ReferenceSignature,
    pub watermark_digest: String,
    pub extractor_checkpoint_id: String,
    pub created_at: DateTime<Utc>,
}

/// 16×16 tile means of a `128×128×3` HWC feature, ordered `(ty, tx, c)`.
pub fn pool_feature(f: &[f32]) -> Vec<f64> {
    assert_eq!(f.len(), IMAGE_SIDE * IMAGE_SIDE * 3, "expected a 128x128x3 feature");
    let mut out = vec![0.0; POOLED_DIM];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let slot = ((y / POOL_TILE) * POOL_GRID + x / POOL_TILE) * 3;
            let px = (y * IMAGE_SIDE + x) * 3;
            for c in 0..3 {
                out[slot + c] += f[px + c] as f64;
            }
        }
    }
    let n = (POOL_TILE * POOL_TILE) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Ψ(F): tile pooling followed by the affine projection.
pub fn project(feature: &[f32], psi: &Psi) -> Vec<f64> {
    psi.apply(&pool_feature(feature))
}

/// `F̃ · C_i` for every row of `C`.
pub fn bit_logits(f: &[f64], c: &[f64]) -> Vec<f64> {
    c.chunks(f.len()).map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum()).collect()
}

/// `σ(F̃ · C_i)`; `c` is `(k, d)` row-major with `d = f.len()`.
pub fn predict_bits(f: &[f64], c: &[f64]) -> Vec<f64> {
    bit_logits(f, c).into_iter().map(zwm_nn::layers::sigmoid).collect()
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(WM_PROB_CLAMP, 1.0 - WM_PROB_CLAMP)
}

/// Summed binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn loss_watermark(probs: &[f64], target: &WatermarkMessage) -> f64 {
    assert_eq!(probs.len(), target.len(), "probability and message lengths differ");
    probs
        .iter()
        .zip(target.bits())
        .map(|(&p, &w)| {
            let p = clamp_p(p);
            if w {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// Gradients of `L_W + λ_C‖C‖²` at a pooled feature.
#[derive(Clone, Debug)]
pub struct SignatureGrads {
    pub loss_w: f64,
    pub loss_total: f64,
    pub c: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn signature_loss_grad(
    pooled: &[f64],
    weight: &[f64],
    bias: &[f64],
    c: &[f64],
    target: &WatermarkMessage,
    lambda_c: f64,
) -> SignatureGrads {
    let d = bias.len();
    let f = affine(weight, bias, pooled);
    let probs = predict_bits(&f, c);
    let loss_w = loss_watermark(&probs, target);
    let reg: f64 = c.iter().map(|v| v * v).sum();
    let ds: Vec<f64> = probs
        .iter()
        .zip(target.bits())
        .map(|(&p, &w)| if clamp_p(p) != p { 0.0 } else { p - if w { 1.0 } else { 0.0 } })
        .collect();
    let mut gc: Vec<f64> = c.iter().map(|v| 2.0 * lambda_c * v).collect();
    let mut df = vec![0.0; d];
    for (i, &g) in ds.iter().enumerate() {
        for j in 0..d {
            gc[i * d + j] += g * f[j];
            df[j] += g * c[i * d + j];
        }
    }
    let mut gw = vec![0.0; weight.len()];
    for j in 0..d {
        for (q, &pv) in pooled.iter().enumerate() {
            gw[j * pooled.len() + q] = df[j] * pv;
        }
    }
    SignatureGrads { loss_w, loss_total: loss_w + lambda_c * reg, c: gc, weight: gw, bias: df }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegisterOptions {
    pub d: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub lambda_c: f64,
    /// Minimum clean logit margin before stopping early.
    pub margin: f64,
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        Self { d: DEFAULT_PROJ_DIM, lr: 1e-2, max_epochs: 50, lambda_c: 1e-4, margin: 2.0, early_stop: true, seed: 0 }
    }
}

/// Optimisation trace of one registration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationTrace {
    /// `L_W` at the start of each epoch.
    pub loss_w: Vec<f64>,
    pub epochs: usize,
    pub clean_accuracy: f64,
    /// Smallest signed logit margin on the clean image (negative if a bit is wrong).
    pub min_margin: f64,
    /// ‖C‖ of the stored signature.
    pub c_norm: f64,
}

/// Frozen feature extractor bound to its checkpoint id.
#[derive(Clone, Debug)]
pub struct FrozenExtractor {
    nets: Nets<f32>,
    id: String,
}

impl FrozenExtractor {
    pub fn new(nets: Nets<f32>) -> Self {
        let id = checkpoint_id(&nets);
        Self { nets, id }
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.id
    }

    pub fn nets(&self) -> &Nets<f32> {
        &self.nets
    }

    /// Spatial features (`128·128·3` each), batched through the extractor.
    pub fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>, WatermarkError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(FEATURE_BATCH) {
            let f = self.nets.fe.extract(&batch_tensor::<f32>(chunk))?;
            out.extend(f.data().chunks(IMAGE_SIDE * IMAGE_SIDE * 3).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    pub fn pooled(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>, WatermarkError> {
        Ok(self.features(images)?.iter().map(|f| pool_feature(f)).collect())
    }
}

fn record_id(ckpt: &str, image: &Image, digest: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(ckpt.as_bytes());
    h.update(image.checksum().as_bytes());
    h.update(digest.as_bytes());
    h.update(seed.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Registers from an already pooled clean feature.
pub fn register_pooled(
    pooled: &[f64],
    watermark: &WatermarkMessage,
    opts: &RegisterOptions,
) -> Result<(ReferenceSignature, RegistrationTrace), WatermarkError> {
    if pooled.len() != POOLED_DIM || opts.d == 0 {
        return Err(WatermarkError::Shape(format!("pooled feature of {} values, d={}", pooled.len(), opts.d)));
    }
    let (k, d) = (watermark.len(), opts.d);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let psi0 = Psi::init(d, &mut rng);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
    let mut c = Param::<f64>::new(&[k, d], (0..k * d).map(|_| normal.sample(&mut rng)).collect());
    let mut w = Param::<f64>::new(&[d, POOLED_DIM], to64(&psi0.weight));
    let mut b = Param::<f64>::new(&[d], to64(&psi0.bias));
    let mut opt = Adam::new(opts.lr);
    let mut trace = RegistrationTrace::default();
    let margin_of = |w: &[f64], b: &[f64], c: &[f64]| {
        let s = bit_logits(&affine(w, b, pooled), c);
        s.iter().zip(watermark.bits()).map(|(&v, &bit)| if bit { v } else { -v }).fold(f64::INFINITY, f64::min)
    };
    for _ in 0..opts.max_epochs {
        let g = signature_loss_grad(pooled, &w.value, &b.value, &c.value, watermark, opts.lambda_c);
        trace.loss_w.push(g.loss_w);
        c.grad = g.c;
        w.grad = g.weight;
        b.grad = g.bias;
        opt.step(&mut [("c".into(), &mut c), ("w".into(), &mut w), ("b".into(), &mut b)]);
        trace.epochs += 1;
        if opts.early_stop && margin_of(&w.value, &b.value, &c.value) >= opts.margin {
            break;
        }
    }
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let sig = ReferenceSignature {
        k,
        d,
        c: to32(&c.value),
        psi: Psi { d, weight: to32(&w.value), bias: to32(&b.value) },
        seed: opts.seed,
    };
    sig.validate()?;
    // judge what is stored, after rounding to f32
    let s = bit_logits(&sig.psi.apply(pooled), &to64(&sig.c));
    let correct = s.iter().zip(watermark.bits()).filter(|(&v, &bit)| (v >= 0.0) == bit).count();
    trace.clean_accuracy = correct as f64 / k as f64;
    trace.min_margin =
        s.iter().zip(watermark.bits()).map(|(&v, &bit)| if bit { v } else { -v }).fold(f64::INFINITY, f64::min);
    trace.c_norm = sig.c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if correct != k {
        return Err(WatermarkError::Convergence { accuracy: trace.clean_accuracy });
    }
    Ok((sig, trace))
}

/// Optimises a reference signature binding `watermark` to `image`.
pub fn register(
    fe: &FrozenExtractor,
    image: &Image,
    watermark: &WatermarkMessage,
    opts: &RegisterOptions,
) -> Result<(SignatureRecord, RegistrationTrace), WatermarkError> {
    let pooled = fe.pooled(&[image])?.remove(0);
    let (signature, trace) = register_pooled(&pooled, watermark, opts)?;
    let digest = watermark.digest();
    let record = SignatureRecord {
        record_id: record_id(fe.checkpoint_id(), image, &digest, opts.seed),
        signature,
        watermark_digest: digest,
        extractor_checkpoint_id: fe.checkpoint_id().to_string(),
        created_at: Utc::now(),
    };
    Ok((record, trace))
}

/// Recovered message with per-bit probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub message: WatermarkMessage,
    pub probs: Vec<f64>,
}

/// Thresholds `σ(Ψ(F)·C_i)` at 0.5 for an already pooled feature.
pub fn extract_pooled(pooled: &[f64], sig: &ReferenceSignature) -> Extraction {
    let probs = predict_bits(&sig.psi.apply(pooled), &to64(&sig.c));
    let bits = probs.iter().map(|&p| p >= 0.5).collect();
    Extraction { message: WatermarkMessage { bits }, probs }
}

fn check_binding(fe: &FrozenExtractor, record: &SignatureRecord) -> Result<(), WatermarkError> {
    if record.extractor_checkpoint_id != fe.checkpoint_id() {
        return Err(WatermarkError::CheckpointMismatch {
            expected: record.extractor_checkpoint_id.clone(),
            found: fe.checkpoint_id().to_string(),
        });
    }
    record.signature.validate()
}

pub fn extract(fe: &FrozenExtractor, image: &Image, record: &SignatureRecord) -> Result<Extraction, WatermarkError> {
    check_binding(fe, record)?;
    let pooled = fe.pooled(&[image])?.remove(0);
    Ok(extract_pooled(&pooled, &record.signature))
}

/// Batched extraction, one record per image.
pub fn extract_many(
    fe: &FrozenExtractor,
    images: &[&Image],
    records: &[&SignatureRecord],
) -> Result<Vec<Extraction>, WatermarkError> {
    if images.len() != records.len() {
        return Err(WatermarkError::Shape(format!("{} images but {} records", images.len(), records.len())));
    }
    for r in records {
        check_binding(fe, r)?;
    }
    let pooled = fe.pooled(images)?;
    Ok(pooled.iter().zip(records).map(|(p, r)| extract_pooled(p, &r.signature)).collect())
}
