use rand::Rng;
use zwm_nn::init::{trunc_normal, INIT_STD};
use zwm_nn::layers::{BlockCache, Linear, TransformerBlock};
use zwm_nn::{join, Module, Param, Real, Tensor};

use super::{ensure_finite, patchify, unpatchify, ModelConfig, ModelError, NUM_PATCHES, PATCH_DIM};

/// Patch-token transformer mapping an image to a 128×128×3 spatial feature.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    pub patch_embed: Linear<T>,
    pub pos: Param<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub to_spatial: Linear<T>,
    dim: usize,
}

pub struct FeCache<T> {
    patches: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    tokens: Tensor<T>,
}

impl<T: Real> FeCache<T> {
    /// Final-layer tokens, `(B, 64, d)`.
    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }
}

/// Patches with pixels rescaled from `[0, 1]` to `[-1, 1]`.
///
/// All-positive inputs give every weight of a patch-embedding row the same
/// gradient sign, which drives tokens towards a shared brightness direction.
fn input_patches<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let two = T::of(2.0);
    patchify(x).map(|v| v * two - T::one())
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.fe_dim;
        Self {
            patch_embed: Linear::new(PATCH_DIM, d, rng),
            pos: Param::new(&[NUM_PATCHES, d], trunc_normal(rng, NUM_PATCHES * d, INIT_STD)),
            blocks: (0..cfg.fe_depth)
                .map(|_| TransformerBlock::new(d, cfg.fe_heads, cfg.ff_mult, cfg.ln_eps, rng))
                .collect(),
            to_spatial: Linear::new(d, PATCH_DIM, rng),
            dim: d,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, patches: &Tensor<T>) -> Tensor<T> {
        let mut z = self.patch_embed.forward(patches);
        for tok in z.data_mut().chunks_mut(NUM_PATCHES * self.dim) {
            for (v, &p) in tok.iter_mut().zip(&self.pos.value) {
                *v += p;
            }
        }
        z
    }

    /// Image batch `(B, 128, 128, 3)` → tokens `(B, 64, d)` after all blocks.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut z = self.embed(&input_patches(x));
        for (i, block) in self.blocks.iter().enumerate() {
            z = block.forward(&z).0;
            ensure_finite(&z, "feature extractor", i)?;
        }
        Ok(z)
    }

    /// Per-token linear map to 16×16×3 tiles placed on the 8×8 patch grid.
    pub fn to_spatial(&self, tokens: &Tensor<T>) -> Tensor<T> {
        unpatchify(&self.to_spatial.forward(tokens))
    }

    pub fn extract(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(self.to_spatial(&self.encode(x)?))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FeCache<T>), ModelError> {
        let patches = input_patches(x);
        let mut z = self.embed(&patches);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, c) = block.forward(&z);
            ensure_finite(&y, "feature extractor", i)?;
            caches.push(c);
            z = y;
        }
        let f = self.to_spatial(&z);
        Ok((f, FeCache { patches, blocks: caches, tokens: z }))
    }

    /// Accumulates parameter gradients for `dL/dF_s`.
    pub fn backward(&mut self, cache: &FeCache<T>, df: &Tensor<T>) {
        let dp = patchify(df);
        let mut dz = self.to_spatial.backward(&cache.tokens, &dp);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dz = block.backward(c, &dz);
        }
        for tok in dz.data().chunks(NUM_PATCHES * self.dim) {
            for (g, &d) in self.pos.grad.iter_mut().zip(tok) {
                *g += d;
            }
        }
        self.patch_embed.accumulate_param_grads(&cache.patches, &dz);
    }
}

impl<T: Real> Module<T> for FeatureExtractor<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "pos"), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.to_spatial.visit(&join(prefix, "to_spatial"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "pos"), &mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.to_spatial.visit_mut(&join(prefix, "to_spatial"), out);
    }
}
