use rand::Rng;
use zwm_nn::init::{trunc_normal, INIT_STD};
use zwm_nn::layers::{sigmoid, BlockCache, Linear, TransformerBlock};
use zwm_nn::{join, Module, Param, Real, Tensor};

use super::{ensure_finite, patchify, unpatchify, ModelConfig, ModelError, NUM_PATCHES, PATCH_DIM};

/// Transformer classifier over spatial features with a prepended learned
/// class token; outputs one logit per sample (clean = 1).
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub embed: Linear<T>,
    pub cls: Param<T>,
    pub pos: Param<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub head: Linear<T>,
    dim: usize,
}

pub struct DiscCache<T> {
    patches: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    cls_out: Tensor<T>,
}

const SEQ: usize = NUM_PATCHES + 1;

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_dim;
        Self {
            embed: Linear::new(PATCH_DIM, d, rng),
            cls: Param::new(&[d], trunc_normal(rng, d, INIT_STD)),
            pos: Param::new(&[SEQ, d], trunc_normal(rng, SEQ * d, INIT_STD)),
            blocks: (0..cfg.d_depth)
                .map(|_| TransformerBlock::new(d, cfg.d_heads, cfg.ff_mult, cfg.ln_eps, rng))
                .collect(),
            head: Linear::new(d, 1, rng),
            dim: d,
        }
    }

    /// Logits for a batch of spatial features `(B, 128, 128, 3)`.
    pub fn forward(&self, f: &Tensor<T>) -> Result<(Vec<T>, DiscCache<T>), ModelError> {
        let d = self.dim;
        let patches = patchify(f);
        let b = patches.shape()[0];
        let e = self.embed.forward(&patches);
        let mut seq = vec![T::zero(); b * SEQ * d];
        for n in 0..b {
            let dst = &mut seq[n * SEQ * d..][..SEQ * d];
            dst[..d].copy_from_slice(&self.cls.value);
            dst[d..].copy_from_slice(&e.data()[n * NUM_PATCHES * d..][..NUM_PATCHES * d]);
            for (v, &p) in dst.iter_mut().zip(&self.pos.value) {
                *v += p;
            }
        }
        let mut z = Tensor::from_vec(&[b, SEQ, d], seq);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, c) = block.forward(&z);
            ensure_finite(&y, "discriminator", i)?;
            caches.push(c);
            z = y;
        }
        let cls_out: Vec<T> = z.data().chunks(SEQ * d).flat_map(|s| s[..d].to_vec()).collect();
        let cls_out = Tensor::from_vec(&[b, d], cls_out);
        let logits = self.head.forward(&cls_out).into_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { network: "discriminator", block: self.blocks.len() });
        }
        Ok((logits, DiscCache { patches, blocks: caches, cls_out }))
    }

    /// Probability that each feature came from an undistorted image.
    pub fn discriminate(&self, f: &Tensor<T>) -> Result<Vec<T>, ModelError> {
        Ok(self.forward(f)?.0.into_iter().map(sigmoid).collect())
    }

    /// Accumulates parameter gradients and returns `dL/dF_s`.
    pub fn backward(&mut self, cache: &DiscCache<T>, dlogits: &[T]) -> Tensor<T> {
        let d = self.dim;
        let b = dlogits.len();
        let dcls = self.head.backward(&cache.cls_out, &Tensor::from_vec(&[b, 1], dlogits.to_vec()));
        let mut dseq = vec![T::zero(); b * SEQ * d];
        for n in 0..b {
            dseq[n * SEQ * d..][..d].copy_from_slice(&dcls.data()[n * d..][..d]);
        }
        let mut dz = Tensor::from_vec(&[b, SEQ, d], dseq);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dz = block.backward(c, &dz);
        }
        let mut de = Vec::with_capacity(b * NUM_PATCHES * d);
        for s in dz.data().chunks(SEQ * d) {
            for (g, &v) in self.pos.grad.iter_mut().zip(s) {
                *g += v;
            }
            for (g, &v) in self.cls.grad.iter_mut().zip(&s[..d]) {
                *g += v;
            }
            de.extend_from_slice(&s[d..]);
        }
        let dp = self.embed.backward(&cache.patches, &Tensor::from_vec(&[b, NUM_PATCHES, d], de));
        unpatchify(&dp)
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.embed.visit(&join(prefix, "embed"), out);
        out.push((join(prefix, "cls"), &self.cls));
        out.push((join(prefix, "pos"), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.embed.visit_mut(&join(prefix, "embed"), out);
        out.push((join(prefix, "cls"), &mut self.cls));
        out.push((join(prefix, "pos"), &mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}
