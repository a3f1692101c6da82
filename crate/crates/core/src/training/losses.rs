//! Reconstruction, discriminator and adversarial losses with their gradients.

use zwm_nn::Real;

use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable "valid" Gaussian filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        let row = &x[i * w..][..w];
        for j in 0..ow {
            tmp[i * ow + j] = g.iter().zip(&row[j..j + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for (k, &gk) in g.iter().enumerate() {
            let src = &tmp[(i + k) * ow..][..ow];
            for (o, &s) in out[i * ow..][..ow].iter_mut().zip(src) {
                *o += gk * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `oh x ow` map back onto `h x w`.
fn filter_valid_adjoint(y: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..oh {
        for (k, &gk) in g.iter().enumerate() {
            let dst = &mut tmp[(i + k) * ow..][..ow];
            for (d, &s) in dst.iter_mut().zip(&y[i * ow..][..ow]) {
                *d += gk * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let row = &mut out[i * w..][..w];
        for j in 0..ow {
            let v = tmp[i * ow + j];
            for (o, &gk) in row[j..j + SSIM_WINDOW].iter_mut().zip(g) {
                *o += gk * v;
            }
        }
    }
    out
}

fn plane<T: Real>(data: &[T], h: usize, w: usize, c: usize) -> Vec<f64> {
    (0..h * w).map(|i| data[i * 3 + c].as_f64()).collect()
}

/// SSIM of `y` against reference `x` (HWC, 3 channels), optionally with `dSSIM/dy`.
fn ssim_impl<T: Real>(x: &[T], y: &[T], h: usize, w: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    assert_eq!(x.len(), h * w * 3);
    assert_eq!(y.len(), x.len());
    assert!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "image smaller than the SSIM window");
    let g = gaussian_window();
    let m = ((h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW)) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; x.len()]);
    for c in 0..3 {
        let xp = plane(x, h, w, c);
        let yp = plane(y, h, w, c);
        let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&xp, h, w, &g);
        let my = filter_valid(&yp, h, w, &g);
        let exx = filter_valid(&sq(&xp, &xp), h, w, &g);
        let eyy = filter_valid(&sq(&yp, &yp), h, w, &g);
        let exy = filter_valid(&sq(&xp, &yp), h, w, &g);
        let n = mx.len();
        let (mut gmu, mut gxy, mut gyy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut sum = 0.0;
        for k in 0..n {
            let (ux, uy) = (mx[k], my[k]);
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * (exy[k] - ux * uy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = (exx[k] - ux * ux) + (eyy[k] - uy * uy) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            sum += s;
            if want_grad {
                gmu[k] = s * (2.0 * ux / a1 - 2.0 * uy / b1 - 2.0 * ux / a2 + 2.0 * uy / b2);
                gxy[k] = 2.0 * s / a2;
                gyy[k] = -s / b2;
            }
        }
        total += sum / m;
        if let Some(out) = grad.as_mut() {
            let scale = 1.0 / (3.0 * m);
            let d_mu = filter_valid_adjoint(&gmu, h, w, &g);
            let d_xy = filter_valid_adjoint(&gxy, h, w, &g);
            let d_yy = filter_valid_adjoint(&gyy, h, w, &g);
            for i in 0..h * w {
                out[i * 3 + c] = scale * (d_mu[i] + xp[i] * d_xy[i] + 2.0 * yp[i] * d_yy[i]);
            }
        }
    }
    (total / 3.0, grad)
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5, valid region), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    assert_eq!((a.height(), a.width()), (b.height(), b.width()), "ssim shape mismatch");
    ssim_impl(a.data(), b.data(), a.height(), a.width(), false).0
}

/// `(SSIM(x, y), dSSIM/dy)` over raw HWC buffers.
pub fn ssim_grad<T: Real>(x: &[T], y: &[T], h: usize, w: usize) -> (f64, Vec<f64>) {
    let (s, g) = ssim_impl(x, y, h, w, true);
    (s, g.expect("gradient requested"))
}

/// `λ_S (1 − SSIM(x, x̂)) + λ_M · MSE(x, x̂)`.
pub fn loss_reconstruction(x: &Image, x_hat: &Image, lambda_s: f64, lambda_m: f64) -> f64 {
    reconstruction_value_grad(x.data(), x_hat.data(), x.height(), x.width(), lambda_s, lambda_m, false).0
}

/// Loss and its gradient with respect to `x_hat`.
pub fn reconstruction_value_grad<T: Real>(
    x: &[T],
    x_hat: &[T],
    h: usize,
    w: usize,
    lambda_s: f64,
    lambda_m: f64,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let mse = x.iter().zip(x_hat).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / n;
    let (s, sg) = if lambda_s != 0.0 { ssim_impl(x, x_hat, h, w, want_grad) } else { (1.0, None) };
    let loss = lambda_s * (1.0 - s) + lambda_m * mse;
    if !want_grad {
        return (loss, Vec::new());
    }
    let mut g: Vec<f64> = x.iter().zip(x_hat).map(|(a, b)| lambda_m * 2.0 * (b.as_f64() - a.as_f64()) / n).collect();
    if let Some(sg) = sg {
        for (gi, si) in g.iter_mut().zip(sg) {
            *gi -= lambda_s * si;
        }
    }
    (loss, g)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `−mean log p_clean − mean log(1 − p_dist)`; minimised by a good discriminator.
pub fn loss_discriminator(p_clean: &[f64], p_dist: &[f64]) -> f64 {
    let a = p_clean.iter().map(|&p| -clamp_prob(p).ln()).sum::<f64>() / p_clean.len() as f64;
    let b = p_dist.iter().map(|&p| -(1.0 - clamp_prob(p)).ln()).sum::<f64>() / p_dist.len() as f64;
    a + b
}

/// `mean log(1 − p_dist)`; minimised by an extractor that fools the discriminator.
pub fn loss_adversarial(p_dist: &[f64]) -> f64 {
    p_dist.iter().map(|&p| (1.0 - clamp_prob(p)).ln()).sum::<f64>() / p_dist.len() as f64
}

fn sigmoid(v: f64) -> f64 {
    zwm_nn::layers::sigmoid(v)
}

fn inside_clamp(p: f64) -> bool {
    (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p)
}

/// Discriminator loss from logits with gradients `(loss, dL/dl_clean, dL/dl_dist)`.
pub fn discriminator_from_logits(l_clean: &[f64], l_dist: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let pc: Vec<f64> = l_clean.iter().map(|&l| sigmoid(l)).collect();
    let pd: Vec<f64> = l_dist.iter().map(|&l| sigmoid(l)).collect();
    let (nc, nd) = (pc.len() as f64, pd.len() as f64);
    let gc = pc.iter().map(|&p| if inside_clamp(p) { -(1.0 - p) / nc } else { 0.0 }).collect();
    let gd = pd.iter().map(|&p| if inside_clamp(p) { p / nd } else { 0.0 }).collect();
    (loss_discriminator(&pc, &pd), gc, gd)
}

/// Adversarial loss from distorted-feature logits with `dL/dl`.
pub fn adversarial_from_logits(l_dist: &[f64]) -> (f64, Vec<f64>) {
    let pd: Vec<f64> = l_dist.iter().map(|&l| sigmoid(l)).collect();
    let n = pd.len() as f64;
    let g = pd.iter().map(|&p| if inside_clamp(p) { -p / n } else { 0.0 }).collect();
    (loss_adversarial(&pd), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjoint_identity() {
        let (h, w) = (14, 13);
        let g = gaussian_window();
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let oh = (h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW);
        let y: Vec<f64> = (0..oh).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = filter_valid(&x, h, w, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = filter_valid_adjoint(&y, h, w, &g).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
