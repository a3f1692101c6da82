//! The three networks: patch-transformer feature extractor, patch-transformer
//! discriminator and convolutional encoder–decoder reconstructor.

mod discriminator;
mod extractor;
mod reconstructor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zwm_nn::{join, Module, Param, Real, Tensor};

use crate::data::derive_seed;
use crate::image::IMAGE_SIDE;

pub use discriminator::{DiscCache, Discriminator};
pub use extractor::{FeCache, FeatureExtractor};
pub use reconstructor::{ReconCache, Reconstructor};

pub const PATCH: usize = 16;
pub const GRID: usize = IMAGE_SIDE / PATCH;
pub const NUM_PATCHES: usize = GRID * GRID;
pub const PATCH_DIM: usize = PATCH * PATCH * 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite activations in {network} after block {block}")]
    NonFinite { network: &'static str, block: usize },
    #[error("model configuration: {0}")]
    Config(String),
}

/// Architecture hyperparameters shared by checkpoints and training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub fe_dim: usize,
    pub fe_depth: usize,
    pub fe_heads: usize,
    pub d_dim: usize,
    pub d_depth: usize,
    pub d_heads: usize,
    pub ff_mult: usize,
    /// Encoder widths of the four downsampling stages; the decoder mirrors them.
    pub r_widths: Vec<usize>,
    pub r_bottleneck: usize,
    pub ln_eps: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fe_dim: 192,
            fe_depth: 12,
            fe_heads: 6,
            d_dim: 64,
            d_depth: 8,
            d_heads: 4,
            ff_mult: 4,
            r_widths: vec![8, 16, 32, 64],
            r_bottleneck: 512,
            ln_eps: 1e-6,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.fe_dim == 0 || self.fe_heads == 0 || self.fe_dim % self.fe_heads != 0 {
            return err(format!("fe_dim {} not divisible by fe_heads {}", self.fe_dim, self.fe_heads));
        }
        if self.d_dim == 0 || self.d_heads == 0 || self.d_dim % self.d_heads != 0 {
            return err(format!("d_dim {} not divisible by d_heads {}", self.d_dim, self.d_heads));
        }
        if self.fe_depth == 0 || self.d_depth == 0 || self.ff_mult == 0 {
            return err("depths and ff_mult must be positive".into());
        }
        // four 2x pools take 128 down to 8
        if self.r_widths.len() != 4 || self.r_widths.contains(&0) || self.r_bottleneck == 0 {
            return err(format!("r_widths must hold 4 positive widths, got {:?}", self.r_widths));
        }
        Ok(())
    }
}

/// The extractor, discriminator and reconstructor trained together.
#[derive(Clone, Debug)]
pub struct Nets<T> {
    pub cfg: ModelConfig,
    pub fe: FeatureExtractor<T>,
    pub d: Discriminator<T>,
    pub r: Reconstructor<T>,
}

impl<T: Real> Nets<T> {
    /// Each network draws its initial weights from its own stream of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let rng = |i| ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i]));
        Ok(Self {
            cfg: cfg.clone(),
            fe: FeatureExtractor::new(cfg, &mut rng(1)),
            d: Discriminator::new(cfg, &mut rng(2)),
            r: Reconstructor::new(cfg, &mut rng(3)),
        })
    }
}

impl<T: Real> Module<T> for Nets<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.fe.visit(&join(prefix, "fe"), out);
        self.d.visit(&join(prefix, "d"), out);
        self.r.visit(&join(prefix, "r"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.fe.visit_mut(&join(prefix, "fe"), out);
        self.d.visit_mut(&join(prefix, "d"), out);
        self.r.visit_mut(&join(prefix, "r"), out);
    }
}

/// `(B, 128, 128, 3)` → `(B, 64, 768)`, each patch flattened `(py, px, c)`.
pub fn patchify<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let b = check_image_batch(x);
    let mut out = vec![T::zero(); b * NUM_PATCHES * PATCH_DIM];
    let src = x.data();
    for n in 0..b {
        for gy in 0..GRID {
            for gx in 0..GRID {
                let dst = &mut out[(n * NUM_PATCHES + gy * GRID + gx) * PATCH_DIM..][..PATCH_DIM];
                for py in 0..PATCH {
                    let row = ((n * IMAGE_SIDE + gy * PATCH + py) * IMAGE_SIDE + gx * PATCH) * 3;
                    dst[py * PATCH * 3..][..PATCH * 3].copy_from_slice(&src[row..row + PATCH * 3]);
                }
            }
        }
    }
    Tensor::from_vec(&[b, NUM_PATCHES, PATCH_DIM], out)
}

/// Inverse of [`patchify`]: tile `8 i + j` lands at grid cell `(i, j)`.
pub fn unpatchify<T: Real>(p: &Tensor<T>) -> Tensor<T> {
    assert_eq!(&p.shape()[1..], &[NUM_PATCHES, PATCH_DIM], "patch tensor shape");
    let b = p.shape()[0];
    let mut out = vec![T::zero(); b * IMAGE_SIDE * IMAGE_SIDE * 3];
    let src = p.data();
    for n in 0..b {
        for gy in 0..GRID {
            for gx in 0..GRID {
                let tile = &src[(n * NUM_PATCHES + gy * GRID + gx) * PATCH_DIM..][..PATCH_DIM];
                for py in 0..PATCH {
                    let row = ((n * IMAGE_SIDE + gy * PATCH + py) * IMAGE_SIDE + gx * PATCH) * 3;
                    out[row..row + PATCH * 3].copy_from_slice(&tile[py * PATCH * 3..][..PATCH * 3]);
                }
            }
        }
    }
    Tensor::from_vec(&[b, IMAGE_SIDE, IMAGE_SIDE, 3], out)
}

pub(crate) fn check_image_batch<T: Real>(x: &Tensor<T>) -> usize {
    match x.shape() {
        &[b, IMAGE_SIDE, IMAGE_SIDE, 3] => b,
        s => panic!("expected (B, {IMAGE_SIDE}, {IMAGE_SIDE}, 3), got {s:?}"),
    }
}

pub(crate) fn ensure_finite<T: Real>(t: &Tensor<T>, network: &'static str, block: usize) -> Result<(), ModelError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { network, block })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_roundtrip() {
        let x: Tensor<f32> = Tensor::from_vec(
            &[2, IMAGE_SIDE, IMAGE_SIDE, 3],
            (0..2 * IMAGE_SIDE * IMAGE_SIDE * 3).map(|i| i as f32).collect(),
        );
        let p = patchify(&x);
        // first sample of tile (1, 2) is pixel (16, 32)
        assert_eq!(p.data()[(GRID + 2) * PATCH_DIM], x.data()[(16 * IMAGE_SIDE + 32) * 3]);
        assert_eq!(unpatchify(&p), x);
    }

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig { fe_dim: 64, fe_heads: 6, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
