//! Minimal raster plots (no text): line charts and heatmaps as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::EvalError;

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [[u8; 3]; 6] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn save(img: &RgbImage, path: &Path) -> Result<(), EvalError> {
    img.save(path).map_err(|e| EvalError::Io { path: path.to_path_buf(), message: e.to_string() })
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Line chart of every series on shared axes; series colours follow the palette order.
pub fn plot_lines(path: &Path, series: &[Series]) -> Result<(), EvalError> {
    let (w, h, pad) = (640i64, 400i64, 30i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmin > xmax {
        return save(&img, path);
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (pad, h - pad), (w - pad, h - pad), axis);
    line(&mut img, (pad, pad), (pad, h - pad), axis);
    let map = |x: f64, y: f64| {
        let px = pad + ((x - xmin) / (xmax - xmin) * (w - 2 * pad) as f64).round() as i64;
        let py = h - pad - ((y - ymin) / (ymax - ymin) * (h - 2 * pad) as f64).round() as i64;
        (px, py)
    };
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let valid: Vec<(i64, i64)> =
            s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| map(x, y)).collect();
        for pair in valid.windows(2) {
            line(&mut img, pair[0], pair[1], c);
        }
        for &(x, y) in &valid {
            for d in -2..=2 {
                line(&mut img, (x + d, y - 2), (x + d, y + 2), c);
            }
        }
    }
    save(&img, path)
}

/// Heatmap of values in `[-1, 1]`: blue for −1, white for 0, red for 1.
pub fn plot_heatmap(path: &Path, m: &[Vec<f64>]) -> Result<(), EvalError> {
    let cell = 12u32;
    let n = m.len() as u32;
    let mut img = RgbImage::from_pixel((n * cell).max(1), (n * cell).max(1), Rgb([255, 255, 255]));
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let v = v.clamp(-1.0, 1.0);
            let fade = ((1.0 - v.abs()) * 255.0) as u8;
            let c = if v >= 0.0 { Rgb([255, fade, fade]) } else { Rgb([fade, fade, 255]) };
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, c);
                }
            }
        }
    }
    save(&img, path)
}
