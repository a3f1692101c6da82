//! Image datasets: a procedural labelled generator and a directory loader.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{Image, ImageError, IMAGE_SIDE};

pub const SYNTH_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; SYNTH_CLASSES] =
    ["circle", "square", "triangle", "hstripes", "vstripes", "dstripes", "checker", "ring", "cross", "dots"];

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

/// Mixes several words into one seed (splitmix64 finaliser over a running hash).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rand_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// One image of class `label`: a shape or texture over a random linear-gradient background.
pub fn synth_image(label: usize, seed: u64) -> Image {
    assert!(label < SYNTH_CLASSES, "label {label} out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = IMAGE_SIDE as f32;
    let bg0 = rand_color(&mut rng);
    let bg1 = rand_color(&mut rng);
    let mut fg = rand_color(&mut rng);
    // keep the foreground visible against the background
    for c in 0..3 {
        if (fg[c] - 0.5 * (bg0[c] + bg1[c])).abs() < 0.3 {
            fg[c] = if bg0[c] + bg1[c] > 1.0 { fg[c] * 0.3 } else { 0.7 + 0.3 * fg[c] };
        }
    }
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());
    let cx = rng.gen_range(0.3..0.7) * n;
    let cy = rng.gen_range(0.3..0.7) * n;
    let r = rng.gen_range(0.15..0.3) * n;
    let period = rng.gen_range(10.0..24.0f32);
    let phase = rng.gen_range(0.0..period);
    let inside = |y: f32, x: f32| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match label {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
            3 => ((y + phase) / period).floor() as i64 % 2 == 0,
            4 => ((x + phase) / period).floor() as i64 % 2 == 0,
            5 => ((x + y + phase) / (period * 1.4)).floor() as i64 % 2 == 0,
            6 => (((x + phase) / period).floor() as i64 + ((y + phase) / period).floor() as i64) % 2 == 0,
            7 => {
                let d = (dx * dx + dy * dy).sqrt();
                d <= r && d >= r * 0.6
            }
            8 => (dx.abs() <= r * 0.25 && dy.abs() <= r) || (dy.abs() <= r * 0.25 && dx.abs() <= r),
            _ => {
                let gx = (x + phase) % period - period / 2.0;
                let gy = (y + phase) % period - period / 2.0;
                gx * gx + gy * gy <= (period * 0.25) * (period * 0.25)
            }
        }
    };
    Image::from_fn(IMAGE_SIDE, IMAGE_SIDE, |y, x, c| {
        let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
        if inside(fy, fx) {
            fg[c]
        } else {
            let t = (((fx / n - 0.5) * ga + (fy / n - 0.5) * gb) + 0.71) / 1.42;
            bg0[c] * (1.0 - t) + bg1[c] * t
        }
    })
}

/// `n` images with balanced labels (`i % 10`), deterministic in `seed`.
pub fn synth_dataset(n: usize, seed: u64) -> Vec<LabeledImage> {
    (0..n)
        .map(|i| {
            let label = i % SYNTH_CLASSES;
            LabeledImage { image: synth_image(label, derive_seed(&[seed, i as u64])), label }
        })
        .collect()
}

/// PNG/JPEG files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, ImageError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| ImageError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every image of [`list_images`], resized to 128×128.
pub fn load_dir(dir: &Path) -> Result<Vec<Image>, ImageError> {
    list_images(dir)?.iter().map(|p| Image::load(p)).collect()
}
