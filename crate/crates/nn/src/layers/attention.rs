use rand::Rng;

use super::activation::{gelu, gelu_backward, softmax_rows_inplace};
use super::linear::Linear;
use super::norm::{LayerNorm, LnCache};
use crate::tensor::{join, Module, Param, Tensor};
use crate::{gemm, MatMut, MatRef, Real};

/// Multi-head scaled dot-product self-attention over `(batch, tokens, dim)`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    heads: usize,
    dim: usize,
}

pub struct AttentionCache<T> {
    input: Tensor<T>,
    qkv: Tensor<T>,
    probs: Vec<T>,
    mixed: Tensor<T>,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self { qkv: Linear::new(dim, 3 * dim, rng), proj: Linear::new(dim, dim, rng), heads, dim }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, AttentionCache<T>) {
        let [batch, tokens, dim] = dims3(x);
        assert_eq!(dim, self.dim);
        let dh = dim / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut probs = vec![T::zero(); batch * self.heads * tokens * tokens];
        let mut mixed = vec![T::zero(); batch * tokens * dim];
        let row = 3 * dim;
        for b in 0..batch {
            let base = b * tokens * row;
            for h in 0..self.heads {
                let p = &mut probs[(b * self.heads + h) * tokens * tokens..][..tokens * tokens];
                let q = MatRef { data: qkv.data(), offset: base + h * dh, rs: row, cs: 1 };
                let kt = MatRef { data: qkv.data(), offset: base + dim + h * dh, rs: 1, cs: row };
                gemm(tokens, dh, tokens, q, kt, T::zero(), MatMut::rm(p, tokens));
                p.iter_mut().for_each(|v| *v *= scale);
                softmax_rows_inplace(p, tokens);
                let v = MatRef { data: qkv.data(), offset: base + 2 * dim + h * dh, rs: row, cs: 1 };
                let out = MatMut { data: &mut mixed, offset: b * tokens * dim + h * dh, rs: dim, cs: 1 };
                gemm(tokens, tokens, dh, MatRef::rm(p, tokens), v, T::zero(), out);
            }
        }
        let mixed = Tensor::from_vec(x.shape(), mixed);
        let y = self.proj.forward(&mixed);
        (y, AttentionCache { input: x.clone(), qkv, probs, mixed })
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [batch, tokens, dim] = dims3(dy);
        let dh = dim / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let dmixed = self.proj.backward(&cache.mixed, dy);
        let row = 3 * dim;
        let mut dqkv = vec![T::zero(); batch * tokens * row];
        let mut dp = vec![T::zero(); tokens * tokens];
        let qkv = cache.qkv.data();
        for b in 0..batch {
            let base = b * tokens * row;
            for h in 0..self.heads {
                let p = &cache.probs[(b * self.heads + h) * tokens * tokens..][..tokens * tokens];
                let d_out = MatRef { data: dmixed.data(), offset: b * tokens * dim + h * dh, rs: dim, cs: 1 };
                // dV = P^T dO
                let dv = MatMut { data: &mut dqkv, offset: base + 2 * dim + h * dh, rs: row, cs: 1 };
                gemm(tokens, tokens, dh, MatRef::rm_t(p, tokens), d_out, T::zero(), dv);
                // dP = dO V^T
                let vt = MatRef { data: qkv, offset: base + 2 * dim + h * dh, rs: 1, cs: row };
                gemm(tokens, dh, tokens, d_out, vt, T::zero(), MatMut::rm(&mut dp, tokens));
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for r in 0..tokens {
                    let pr = &p[r * tokens..(r + 1) * tokens];
                    let dr = &mut dp[r * tokens..(r + 1) * tokens];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                let k = MatRef { data: qkv, offset: base + dim + h * dh, rs: row, cs: 1 };
                let dq = MatMut { data: &mut dqkv, offset: base + h * dh, rs: row, cs: 1 };
                gemm(tokens, tokens, dh, MatRef::rm(&dp, tokens), k, T::zero(), dq);
                let q = MatRef { data: qkv, offset: base + h * dh, rs: row, cs: 1 };
                let dk = MatMut { data: &mut dqkv, offset: base + dim + h * dh, rs: row, cs: 1 };
                gemm(tokens, tokens, dh, MatRef::rm_t(&dp, tokens), q, T::zero(), dk);
            }
        }
        let dqkv = Tensor::from_vec(&[batch, tokens, row], dqkv);
        self.qkv.backward(&cache.input, &dqkv)
    }
}

impl<T: Real> Module<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.qkv.visit(&join(prefix, "qkv"), out);
        self.proj.visit(&join(prefix, "proj"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.qkv.visit_mut(&join(prefix, "qkv"), out);
        self.proj.visit_mut(&join(prefix, "proj"), out);
    }
}

/// Post-norm transformer block:
/// `h = LN(x + MHSA(x))`, `y = LN(h + FFN(h))` with a GELU feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock<T> {
    pub attn: MultiHeadAttention<T>,
    pub norm1: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub norm2: LayerNorm<T>,
}

pub struct BlockCache<T> {
    attn: AttentionCache<T>,
    ln1: LnCache<T>,
    h: Tensor<T>,
    pre_act: Tensor<T>,
    act: Tensor<T>,
    ln2: LnCache<T>,
}

impl<T: Real> TransformerBlock<T> {
    pub fn new<R: Rng>(dim: usize, heads: usize, ff_mult: usize, ln_eps: f64, rng: &mut R) -> Self {
        Self {
            attn: MultiHeadAttention::new(dim, heads, rng),
            norm1: LayerNorm::new(dim, ln_eps),
            ff1: Linear::new(dim, ff_mult * dim, rng),
            ff2: Linear::new(ff_mult * dim, dim, rng),
            norm2: LayerNorm::new(dim, ln_eps),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let (mut a, attn) = self.attn.forward(x);
        a.add_assign(x);
        let (h, ln1) = self.norm1.forward(&a);
        let pre_act = self.ff1.forward(&h);
        let act = Tensor::from_vec(pre_act.shape(), gelu(pre_act.data()));
        let mut f = self.ff2.forward(&act);
        f.add_assign(&h);
        let (y, ln2) = self.norm2.forward(&f);
        (y, BlockCache { attn, ln1, h, pre_act, act, ln2 })
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.norm2.backward(&cache.ln2, dy);
        let dact = self.ff2.backward(&cache.act, &g);
        let dpre = Tensor::from_vec(dact.shape(), gelu_backward(cache.pre_act.data(), dact.data()));
        let mut dh = self.ff1.backward(&cache.h, &dpre);
        dh.add_assign(&g);
        let q = self.norm1.backward(&cache.ln1, &dh);
        let mut dx = self.attn.backward(&cache.attn, &q);
        dx.add_assign(&q);
        dx
    }
}

impl<T: Real> Module<T> for TransformerBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.attn.visit(&join(prefix, "attn"), out);
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.ff1.visit(&join(prefix, "ff1"), out);
        self.ff2.visit(&join(prefix, "ff2"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.attn.visit_mut(&join(prefix, "attn"), out);
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.ff1.visit_mut(&join(prefix, "ff1"), out);
        self.ff2.visit_mut(&join(prefix, "ff2"), out);
        self.norm2.visit_mut(&join(prefix, "norm2"), out);
    }
}

fn dims3<T: Real>(x: &Tensor<T>) -> [usize; 3] {
    match x.shape() {
        &[b, n, d] => [b, n, d],
        s => panic!("expected (batch, tokens, dim), got {s:?}"),
    }
}
