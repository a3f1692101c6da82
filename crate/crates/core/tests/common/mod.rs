#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zwm_core::models::ModelConfig;
use zwm_nn::{Module, Real, Tensor};

/// A model small enough for finite differences and short training loops.
pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        fe_dim: 16,
        fe_depth: 2,
        fe_heads: 4,
        d_dim: 16,
        d_depth: 2,
        d_heads: 4,
        ff_mult: 2,
        r_widths: vec![2, 2, 2, 2],
        r_bottleneck: 8,
        ..Default::default()
    }
}

pub fn random_batch<T: Real>(b: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[b, 128, 128, 3], (0..b * 128 * 128 * 3).map(|_| T::of(rng.gen())).collect())
}

/// Central differences on 16 random trainable entries whose names start with
/// `prefix`; the step is `rel_step` times the RMS of the owning tensor
/// (`rel_step` itself for all-zero tensors). Returns `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over the sample.
pub fn fd_check<M: Module<f64>>(
    model: &mut M,
    prefix: &str,
    loss: &mut dyn FnMut(&mut M) -> f64,
    backward: &mut dyn FnMut(&mut M),
    seed: u64,
    rel_step: f64,
) -> f64 {
    model.zero_grad();
    backward(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<(usize, usize)> = model
        .named_params()
        .iter()
        .enumerate()
        .filter(|(_, (name, p))| p.trainable && name.starts_with(prefix))
        .map(|(i, (_, p))| (i, p.len()))
        .collect();
    assert!(!sizes.is_empty(), "no parameters under {prefix:?}");
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let (mut num, mut den_a, mut den_f) = (0.0, 0.0, 0.0);
    for _ in 0..16 {
        let mut r = rng.gen_range(0..total);
        let (pi, idx) = sizes
            .iter()
            .find_map(|&(i, n)| {
                if r < n {
                    Some((i, r))
                } else {
                    r -= n;
                    None
                }
            })
            .unwrap();
        let (analytic, h) = {
            let params = model.named_params();
            let p = params[pi].1;
            let rms = (p.value.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt();
            (p.grad[idx], rel_step * if rms > 0.0 { rms } else { 1.0 })
        };
        let orig = model.named_params()[pi].1.value[idx];
        model.named_params_mut()[pi].1.value[idx] = orig + h;
        let lp = loss(model);
        model.named_params_mut()[pi].1.value[idx] = orig - h;
        let lm = loss(model);
        model.named_params_mut()[pi].1.value[idx] = orig;
        let fd = (lp - lm) / (2.0 * h);
        num += (analytic - fd).powi(2);
        den_a += analytic * analytic;
        den_f += fd * fd;
    }
    num.sqrt() / den_a.sqrt().max(den_f.sqrt()).max(1e-300)
}

/// Relative error of an analytic gradient against central differences of
/// `f` at 16 random coordinates of `x` with absolute step `h`.
pub fn fd_vector(x: &[f64], grad: &[f64], h: f64, seed: u64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xv = x.to_vec();
    let (mut num, mut da, mut df) = (0.0, 0.0, 0.0);
    for _ in 0..16 {
        let i = rng.gen_range(0..x.len());
        xv[i] = x[i] + h;
        let lp = f(&xv);
        xv[i] = x[i] - h;
        let lm = f(&xv);
        xv[i] = x[i];
        let fd = (lp - lm) / (2.0 * h);
        num += (grad[i] - fd).powi(2);
        da += grad[i] * grad[i];
        df += fd * fd;
    }
    num.sqrt() / da.sqrt().max(df.sqrt()).max(1e-300)
}
