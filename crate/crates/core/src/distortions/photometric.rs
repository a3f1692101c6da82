//! Pixel-value distortions: color adjustments, filtering, codecs and noise.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::geometry::reflect;
use super::DistortionError;
use crate::image::Image;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn gray(px: &[f32]) -> f32 {
    px[0] * LUMA[0] + px[1] * LUMA[1] + px[2] * LUMA[2]
}

pub fn brightness(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * factor) as f32);
    out
}

/// Blend with the mean luminance of the whole image.
pub fn contrast(img: &Image, factor: f64) -> Image {
    let n = (img.height() * img.width()) as f64;
    let mean = img.data().chunks(3).map(|p| gray(p) as f64).sum::<f64>() / n;
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (factor * *v as f64 + (1.0 - factor) * mean) as f32);
    out
}

/// Blend each pixel with its own luminance.
pub fn saturation(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(3) {
        let g = gray(px) as f64;
        for v in px.iter_mut() {
            *v = (factor * *v as f64 + (1.0 - factor) * g) as f32;
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns of the colour wheel.
pub fn hue(img: &Image, shift: f64) -> Image {
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0] as f64, px[1] as f64, px[2] as f64);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        px[0] = r as f32;
        px[1] = g as f32;
        px[2] = b as f32;
    }
    out
}

pub fn solarize(img: &Image, threshold: f64) -> Image {
    let t = threshold as f32;
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v >= t {
            *v = 1.0 - *v;
        }
    });
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflect boundaries.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut tmp = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * img.get(y, reflect(x as isize + i as isize - r, w), c) as f64)
                    .sum();
                tmp.set(y, x, c, v as f32);
            }
        }
    }
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp.get(reflect(y as isize + i as isize - r, h), x, c) as f64)
                    .sum();
                out.set(y, x, c, v as f32);
            }
        }
    }
    out
}

pub fn median_filter(img: &Image, size: usize) -> Image {
    let r = (size / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = Image::filled(h, w, 0.0);
    let mut window = Vec::with_capacity(size * size);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        window.push(img.get(reflect(y as isize + dy, h), reflect(x as isize + dx, w), c));
                    }
                }
                window.sort_by(f32::total_cmp);
                out.set(y, x, c, window[window.len() / 2]);
            }
        }
    }
    out
}

/// Baseline JPEG encode at `quality` followed by decode.
pub fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<Image, DistortionError> {
    if !(1..=100).contains(&quality) {
        return Err(DistortionError::Parameter(format!("jpeg quality {quality} outside [1, 100]")));
    }
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(|e| DistortionError::Codec(e.to_string()))?;
    let decoded = image::load(Cursor::new(buf), image::ImageFormat::Jpeg)
        .map_err(|e| DistortionError::Codec(e.to_string()))?
        .to_rgb8();
    Ok(Image::from_rgb8(&decoded))
}

/// Per-channel levels for a uniform palette of `colors` entries, green first.
pub(crate) fn palette_levels(colors: u32) -> [u32; 3] {
    let bits = 31 - colors.leading_zeros();
    let mut per = [0u32; 3];
    // round-robin over G, R, B
    for i in 0..bits {
        per[[1, 0, 2][(i % 3) as usize]] += 1;
    }
    per.map(|b| 1u32 << b)
}

/// Uniform-palette colour quantisation (approximates GIF palette reduction).
pub fn uniform_palette(img: &Image, colors: u32) -> Image {
    let levels = palette_levels(colors);
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(3) {
        for (v, &l) in px.iter_mut().zip(&levels) {
            let steps = (l - 1) as f32;
            *v = (*v * steps).round() / steps;
        }
    }
    out
}

pub fn gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (*v as f64 + sigma * z) as f32;
    }
    out
}

/// Each pixel (all channels) is independently replaced by black or white with
/// probability `density`, split evenly.
pub fn salt_pepper(img: &Image, density: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(3) {
        let u: f64 = rng.gen();
        let salt: bool = rng.gen();
        if u < density {
            let v = if salt { 1.0 } else { 0.0 };
            px.iter_mut().for_each(|p| *p = v);
        }
    }
    out
}

/// Zeroes one square of side `fraction * min(h, w)` placed uniformly inside the frame.
pub fn cutout(img: &Image, fraction: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (img.height(), img.width());
    let side = ((fraction * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
    let y0 = rng.gen_range(0..=h - side);
    let x0 = rng.gen_range(0..=w - side);
    let mut out = img.clone();
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            for c in 0..3 {
                out.set(y, x, c, 0.0);
            }
        }
    }
    out
}
