//! Resampling primitives: reflect-padded bilinear affine warps and separable resizing.

use crate::image::Image;

/// numpy-style `reflect` boundary (`d c b | a b c d | c b a`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Bilinear sample at continuous pixel-index coordinates with reflect padding.
#[inline]
fn sample(img: &Image, fy: f64, fx: f64, out: &mut [f32]) {
    let (h, w) = (img.height(), img.width());
    let y0 = fy.floor();
    let x0 = fx.floor();
    let ty = fy - y0;
    let tx = fx - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let ya = reflect(y0, h);
    let yb = reflect(y0 + 1, h);
    let xa = reflect(x0, w);
    let xb = reflect(x0 + 1, w);
    for (c, o) in out.iter_mut().enumerate() {
        let top = img.get(ya, xa, c) as f64 * (1.0 - tx) + img.get(ya, xb, c) as f64 * tx;
        let bot = img.get(yb, xa, c) as f64 * (1.0 - tx) + img.get(yb, xb, c) as f64 * tx;
        *o = (top * (1.0 - ty) + bot * ty) as f32;
    }
}

/// Warps `img` through an inverse affine map given on centred coordinates.
///
/// For each output pixel centre `p` (relative to the image centre) the source
/// point is `inv * p + shift`, again relative to the centre.
pub(crate) fn warp_centered(img: &Image, inv: [[f64; 2]; 2], shift: [f64; 2]) -> Image {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut out = Image::filled(h, w, 0.0);
    let mut px = [0f32; 3];
    for y in 0..h {
        let v = y as f64 + 0.5 - cy;
        for x in 0..w {
            let u = x as f64 + 0.5 - cx;
            let sx = inv[0][0] * u + inv[0][1] * v + shift[0];
            let sy = inv[1][0] * u + inv[1][1] * v + shift[1];
            sample(img, sy + cy - 0.5, sx + cx - 0.5, &mut px);
            for (c, &p) in px.iter().enumerate() {
                out.set(y, x, c, p);
            }
        }
    }
    out
}

/// Scale applied before rotation so the rotated frame fits inside the output.
pub fn content_preserving_scale(height: usize, width: usize, radians: f64) -> f64 {
    let (c, s) = (radians.cos().abs(), radians.sin().abs());
    let (h, w) = (height as f64, width as f64);
    let bw = w * c + h * s;
    let bh = w * s + h * c;
    (w / bw).min(h / bh)
}

/// Counter-clockwise rotation (as displayed) that shrinks the content so no
/// source pixel leaves the frame; the uncovered border is reflect-filled.
pub fn rotate_preserving_content(img: &Image, degrees: f64) -> Image {
    let t = degrees.to_radians();
    let s = content_preserving_scale(img.height(), img.width(), t);
    let (c, sn) = (t.cos(), t.sin());
    // forward (y down): x' = s(x c + y sn), y' = s(-x sn + y c)
    let inv = [[c / s, -sn / s], [sn / s, c / s]];
    warp_centered(img, inv, [0.0, 0.0])
}

fn triangle(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Separable resampling along one axis with a triangle kernel widened when
/// downsampling (antialiased), half-pixel centre alignment.
fn resample_axis(img: &Image, new_len: usize, horizontal: bool) -> Image {
    let (h, w) = (img.height(), img.width());
    let old_len = if horizontal { w } else { h };
    let scale = new_len as f64 / old_len as f64;
    let support = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    // precompute taps per output coordinate
    let taps: Vec<Vec<(usize, f64)>> = (0..new_len)
        .map(|o| {
            let centre = (o as f64 + 0.5) / scale - 0.5;
            let lo = (centre - support).floor() as isize;
            let hi = (centre + support).ceil() as isize;
            let mut t: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|i| {
                    let wgt = triangle((i as f64 - centre) / support);
                    (wgt > 0.0).then(|| (reflect(i, old_len), wgt))
                })
                .collect();
            let sum: f64 = t.iter().map(|(_, w)| w).sum();
            t.iter_mut().for_each(|(_, w)| *w /= sum);
            t
        })
        .collect();
    let (oh, ow) = if horizontal { (h, new_len) } else { (new_len, w) };
    let mut out = Image::filled(oh, ow, 0.0);
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..3 {
                let v: f64 = if horizontal {
                    taps[x].iter().map(|&(i, wt)| img.get(y, i, c) as f64 * wt).sum()
                } else {
                    taps[y].iter().map(|&(i, wt)| img.get(i, x, c) as f64 * wt).sum()
                };
                out.set(y, x, c, v as f32);
            }
        }
    }
    out
}

pub fn resize(img: &Image, height: usize, width: usize) -> Image {
    let mut out = img.clone();
    if width != out.width() {
        out = resample_axis(&out, width, true);
    }
    if height != out.height() {
        out = resample_axis(&out, height, false);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_reflect() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = Image::from_fn(5, 7, |y, x, c| (y * 31 + x * 7 + c) as f32 / 300.0);
        assert_eq!(resize(&img, 5, 7), img);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = Image::filled(16, 16, 0.3);
        let small = resize(&img, 9, 5);
        assert!(small.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn square_scale_matches_closed_form() {
        let t = 25f64.to_radians();
        let s = content_preserving_scale(128, 128, t);
        assert!((s - 1.0 / (t.cos() + t.sin())).abs() < 1e-12);
    }
}
