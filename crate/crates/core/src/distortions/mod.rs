//! Seedable image distortions for training-time augmentation and robustness testing.
//!
//! A [`DistortionSpec`] serialises as `{"kind": ..., "params": {...}, "seed": n}`
//! and fully determines the transformation it describes.

mod geometry;
mod photometric;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

pub use geometry::{content_preserving_scale, resize, rotate_preserving_content};
pub use photometric::jpeg_roundtrip;

#[derive(Debug, Error)]
pub enum DistortionError {
    #[error("invalid distortion parameter: {0}")]
    Parameter(String),
    #[error("distortion {kind} is not allowed in the {phase} phase")]
    Phase { kind: &'static str, phase: &'static str },
    #[error("codec failure: {0}")]
    Codec(String),
    #[error("input image values outside [0, 1] or non-finite")]
    Input,
    #[error("distortion grid i/o: {0}")]
    Io(String),
}

pub const TRAIN_ROTATION_DEG: f64 = 15.0;
pub const TRAIN_FRACTION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionPhase {
    Training,
    Testing,
}

impl DistortionPhase {
    fn name(self) -> &'static str {
        match self {
            Self::Training => "training",
            Self::Testing => "testing",
        }
    }
}

/// Kind and parameters. Fractions are relative to the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Distortion {
    Identity {},
    Rotation {
        degrees: f64,
    },
    WidthShift {
        fraction: f64,
    },
    HeightShift {
        fraction: f64,
    },
    Shear {
        fraction: f64,
    },
    /// Magnification by `1 + fraction`.
    Zoom {
        fraction: f64,
    },
    Hflip {},
    GaussianBlur {
        sigma: f64,
    },
    Solarization {
        threshold: f64,
    },
    /// Square of side `fraction` of the image side, filled with black.
    Cutout {
        fraction: f64,
    },
    /// Central crop keeping `area` of the pixels, resized back.
    Crop {
        area: f64,
    },
    Jpeg {
        quality: u32,
    },
    Brightness {
        factor: f64,
    },
    Contrast {
        factor: f64,
    },
    /// Hue rotation in turns of the colour wheel.
    Hue {
        shift: f64,
    },
    Saturation {
        factor: f64,
    },
    GaussianNoise {
        sigma: f64,
    },
    SaltPepper {
        density: f64,
    },
    /// Width scaled by `fraction`, then restored to the original size.
    ResizeWidth {
        fraction: f64,
    },
    /// Both sides scaled by `factor`, then restored.
    Rescale {
        factor: f64,
    },
    /// Uniform-palette quantisation to `colors` entries.
    Gif {
        colors: u32,
    },
    MedianFilter {
        size: u32,
    },
}

impl Distortion {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Identity {} => "identity",
            Self::Rotation { .. } => "rotation",
            Self::WidthShift { .. } => "width_shift",
            Self::HeightShift { .. } => "height_shift",
            Self::Shear { .. } => "shear",
            Self::Zoom { .. } => "zoom",
            Self::Hflip {} => "hflip",
            Self::GaussianBlur { .. } => "gaussian_blur",
            Self::Solarization { .. } => "solarization",
            Self::Cutout { .. } => "cutout",
            Self::Crop { .. } => "crop",
            Self::Jpeg { .. } => "jpeg",
            Self::Brightness { .. } => "brightness",
            Self::Contrast { .. } => "contrast",
            Self::Hue { .. } => "hue",
            Self::Saturation { .. } => "saturation",
            Self::GaussianNoise { .. } => "gaussian_noise",
            Self::SaltPepper { .. } => "salt_pepper",
            Self::ResizeWidth { .. } => "resize_width",
            Self::Rescale { .. } => "rescale",
            Self::Gif { .. } => "gif",
            Self::MedianFilter { .. } => "median_filter",
        }
    }

    /// Geometric kinds and identity are the only ones admitted during training.
    pub fn is_training_kind(&self) -> bool {
        matches!(
            self,
            Self::Identity {}
                | Self::Rotation { .. }
                | Self::WidthShift { .. }
                | Self::HeightShift { .. }
                | Self::Shear { .. }
                | Self::Zoom { .. }
                | Self::Hflip {}
        )
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, Self::Cutout { .. } | Self::GaussianNoise { .. } | Self::SaltPepper { .. })
    }

    /// A short label such as `jpeg(50)` for reports and plots.
    pub fn label(&self) -> String {
        let p = match *self {
            Self::Identity {} | Self::Hflip {} => return self.kind().to_string(),
            Self::Rotation { degrees: v }
            | Self::WidthShift { fraction: v }
            | Self::HeightShift { fraction: v }
            | Self::Shear { fraction: v }
            | Self::Zoom { fraction: v }
            | Self::GaussianBlur { sigma: v }
            | Self::Solarization { threshold: v }
            | Self::Cutout { fraction: v }
            | Self::Crop { area: v }
            | Self::Brightness { factor: v }
            | Self::Contrast { factor: v }
            | Self::Hue { shift: v }
            | Self::Saturation { factor: v }
            | Self::GaussianNoise { sigma: v }
            | Self::SaltPepper { density: v }
            | Self::ResizeWidth { fraction: v }
            | Self::Rescale { factor: v } => v,
            Self::Jpeg { quality } => quality as f64,
            Self::Gif { colors } => colors as f64,
            Self::MedianFilter { size } => size as f64,
        };
        format!("{}({})", self.kind(), p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    #[serde(flatten)]
    pub distortion: Distortion,
    #[serde(default)]
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(distortion: Distortion, seed: u64) -> Self {
        Self { distortion, seed }
    }

    pub fn identity() -> Self {
        Self::new(Distortion::Identity {}, 0)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { distortion: self.distortion.clone(), seed }
    }

    /// Checks the parameter domain, plus the training limits when `phase` is training.
    pub fn validate(&self, phase: DistortionPhase) -> Result<(), DistortionError> {
        use Distortion::*;
        let bad = |what: String| Err(DistortionError::Parameter(what));
        let finite_in = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(DistortionError::Parameter(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        match self.distortion {
            Identity {} | Hflip {} => {}
            Rotation { degrees } => finite_in("degrees", degrees, -180.0, 180.0)?,
            WidthShift { fraction } | HeightShift { fraction } | Shear { fraction } => {
                finite_in("fraction", fraction, -1.0, 1.0)?
            }
            Zoom { fraction } => finite_in("fraction", fraction, -0.9, 4.0)?,
            GaussianBlur { sigma } => finite_in("sigma", sigma, 1e-3, 16.0)?,
            Solarization { threshold } => finite_in("threshold", threshold, 0.0, 1.0)?,
            Cutout { fraction } => finite_in("fraction", fraction, 0.0, 1.0)?,
            Crop { area } => {
                if !(area > 0.0) {
                    return bad(format!("crop area {area} must be positive"));
                }
                finite_in("area", area, 0.0, 1.0)?
            }
            Jpeg { quality } => {
                if !(1..=100).contains(&quality) {
                    return bad(format!("jpeg quality {quality} outside [1, 100]"));
                }
            }
            Brightness { factor } | Contrast { factor } | Saturation { factor } => {
                finite_in("factor", factor, 0.0, 100.0)?
            }
            Hue { shift } => finite_in("shift", shift, -1.0, 1.0)?,
            GaussianNoise { sigma } => finite_in("sigma", sigma, 0.0, 1.0)?,
            SaltPepper { density } => finite_in("density", density, 0.0, 1.0)?,
            ResizeWidth { fraction } => {
                if !(fraction > 0.0) {
                    return bad(format!("resize fraction {fraction} must be positive"));
                }
                finite_in("fraction", fraction, 0.0, 1.0)?
            }
            Rescale { factor } => {
                if !(factor > 0.0) {
                    return bad(format!("rescale factor {factor} must be positive"));
                }
                finite_in("factor", factor, 0.0, 4.0)?
            }
            Gif { colors } => {
                if !colors.is_power_of_two() || !(8..=1 << 24).contains(&colors) {
                    return bad(format!("gif colors {colors} must be a power of two >= 8"));
                }
            }
            MedianFilter { size } => {
                if size % 2 == 0 || size > 15 {
                    return bad(format!("median size {size} must be odd and <= 15"));
                }
            }
        }
        if phase == DistortionPhase::Training {
            if !self.distortion.is_training_kind() {
                return Err(DistortionError::Phase { kind: self.distortion.kind(), phase: phase.name() });
            }
            match self.distortion {
                Rotation { degrees } => finite_in("degrees", degrees, -TRAIN_ROTATION_DEG, TRAIN_ROTATION_DEG)?,
                WidthShift { fraction } | HeightShift { fraction } | Shear { fraction } | Zoom { fraction } => {
                    finite_in("fraction", fraction, -TRAIN_FRACTION, TRAIN_FRACTION)?
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Applies `spec` to `image`. The result has the input's shape and lies in `[0, 1]`.
pub fn apply_distortion(image: &Image, spec: &DistortionSpec) -> Result<Image, DistortionError> {
    use Distortion::*;
    spec.validate(DistortionPhase::Testing)?;
    if !image.in_unit_range() {
        return Err(DistortionError::Input);
    }
    let (h, w) = (image.height(), image.width());
    let seed = spec.seed;
    let mut out = match spec.distortion {
        Identity {} => return Ok(image.clone()),
        Rotation { degrees } => rotate_preserving_content(image, degrees),
        WidthShift { fraction } => {
            geometry::warp_centered(image, [[1.0, 0.0], [0.0, 1.0]], [-fraction * w as f64, 0.0])
        }
        HeightShift { fraction } => {
            geometry::warp_centered(image, [[1.0, 0.0], [0.0, 1.0]], [0.0, -fraction * h as f64])
        }
        Shear { fraction } => geometry::warp_centered(image, [[1.0, -fraction], [0.0, 1.0]], [0.0, 0.0]),
        Zoom { fraction } => {
            let s = 1.0 / (1.0 + fraction);
            geometry::warp_centered(image, [[s, 0.0], [0.0, s]], [0.0, 0.0])
        }
        Hflip {} => Image::from_fn(h, w, |y, x, c| image.get(y, w - 1 - x, c)),
        GaussianBlur { sigma } => photometric::gaussian_blur(image, sigma),
        Solarization { threshold } => photometric::solarize(image, threshold),
        Cutout { fraction } => photometric::cutout(image, fraction, seed),
        Crop { area } => {
            let side = area.sqrt();
            let ch = ((h as f64 * side).round() as usize).clamp(1, h);
            let cw = ((w as f64 * side).round() as usize).clamp(1, w);
            let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
            let cropped = Image::from_fn(ch, cw, |y, x, c| image.get(y0 + y, x0 + x, c));
            resize(&cropped, h, w)
        }
        Jpeg { quality } => jpeg_roundtrip(image, quality as u8)?,
        Brightness { factor } => photometric::brightness(image, factor),
        Contrast { factor } => photometric::contrast(image, factor),
        Hue { shift } => photometric::hue(image, shift),
        Saturation { factor } => photometric::saturation(image, factor),
        GaussianNoise { sigma } => photometric::gaussian_noise(image, sigma, seed),
        SaltPepper { density } => photometric::salt_pepper(image, density, seed),
        ResizeWidth { fraction } => {
            let nw = ((w as f64 * fraction).round() as usize).max(1);
            resize(&resize(image, h, nw), h, w)
        }
        Rescale { factor } => {
            let nh = ((h as f64 * factor).round() as usize).max(1);
            let nw = ((w as f64 * factor).round() as usize).max(1);
            resize(&resize(image, nh, nw), h, w)
        }
        Gif { colors } => photometric::uniform_palette(image, colors),
        MedianFilter { size } => photometric::median_filter(image, size as usize),
    };
    out.clamp01();
    Ok(out)
}

/// Number of kinds `sample_training_distortion` chooses between.
pub const TRAINING_KINDS: usize = 6;

/// Draws one geometric distortion uniformly over the six training kinds, with
/// its parameter uniform inside the training limits.
pub fn sample_training_distortion(rng_seed: u64) -> DistortionSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let f = TRAIN_FRACTION;
    let distortion = match rng.gen_range(0..TRAINING_KINDS) {
        0 => Distortion::Rotation { degrees: rng.gen_range(-TRAIN_ROTATION_DEG..=TRAIN_ROTATION_DEG) },
        1 => Distortion::WidthShift { fraction: rng.gen_range(-f..=f) },
        2 => Distortion::HeightShift { fraction: rng.gen_range(-f..=f) },
        3 => Distortion::Shear { fraction: rng.gen_range(-f..=f) },
        4 => Distortion::Zoom { fraction: rng.gen_range(-f..=f) },
        _ => Distortion::Hflip {},
    };
    DistortionSpec::new(distortion, rng.gen())
}

/// The standard distortion grid for `phase`.
///
/// Training returns the geometric rows at their training extremes; testing
/// returns the full evaluation grid.
pub fn photometric_suite(phase: DistortionPhase) -> Vec<DistortionSpec> {
    use Distortion::*;
    let mut d = Vec::new();
    match phase {
        DistortionPhase::Training => {
            let (r, f) = (TRAIN_ROTATION_DEG, TRAIN_FRACTION);
            d.extend([Rotation { degrees: -r }, Rotation { degrees: r }]);
            d.extend([WidthShift { fraction: f }, HeightShift { fraction: f }]);
            d.extend([Shear { fraction: f }, Zoom { fraction: f }, Hflip {}]);
        }
        DistortionPhase::Testing => {
            d.push(Identity {});
            d.extend([Rotation { degrees: -25.0 }, Rotation { degrees: 25.0 }]);
            d.extend([WidthShift { fraction: 0.25 }, HeightShift { fraction: 0.25 }]);
            d.extend([Shear { fraction: 0.25 }, Zoom { fraction: 0.25 }, Hflip {}]);
            d.extend([GaussianBlur { sigma: 1.5 }, GaussianBlur { sigma: 2.0 }]);
            d.push(Solarization { threshold: 0.5 });
            d.push(Cutout { fraction: 0.25 });
            d.extend([Crop { area: 0.5 }, Crop { area: 0.1 }]);
            d.extend([15, 30, 50, 70].map(|q| Jpeg { quality: q }));
            d.extend([Brightness { factor: 2.0 }, Contrast { factor: 2.0 }]);
            d.extend([0.2, 0.4, 0.6].map(|s| Hue { shift: s }));
            d.extend([5.0, 10.0, 15.0].map(|f| Saturation { factor: f }));
            d.extend([0.005, 0.01, 0.05, 0.06, 0.08, 0.10, 0.15].map(|s| GaussianNoise { sigma: s }));
            d.extend([0.05, 0.10, 0.15].map(|p| SaltPepper { density: p }));
            d.extend([0.9, 0.7, 0.5].map(|f| ResizeWidth { fraction: f }));
            d.extend([64, 32, 16].map(|c| Gif { colors: c }));
            d.extend([3, 5].map(|s| MedianFilter { size: s }));
            d.extend([0.5, 2.0].map(|f| Rescale { factor: f }));
        }
    }
    d.into_iter().enumerate().map(|(i, dist)| DistortionSpec::new(dist, 1000 + i as u64)).collect()
}

/// Five increasing intensities of one kind, for BER-vs-intensity curves.
pub fn intensity_sweep(kind: &str) -> Option<Vec<DistortionSpec>> {
    use Distortion::*;
    let v: Vec<Distortion> = match kind {
        "jpeg" => [15, 30, 50, 70, 90].map(|q| Jpeg { quality: q }).to_vec(),
        "gaussian_blur" => [0.5, 1.0, 1.5, 2.0, 3.0].map(|s| GaussianBlur { sigma: s }).to_vec(),
        "crop" => [0.9, 0.7, 0.5, 0.3, 0.1].map(|a| Crop { area: a }).to_vec(),
        "gaussian_noise" => [0.005, 0.01, 0.05, 0.1, 0.15].map(|s| GaussianNoise { sigma: s }).to_vec(),
        "salt_pepper" => [0.01, 0.05, 0.1, 0.15, 0.2].map(|p| SaltPepper { density: p }).to_vec(),
        "hue" => [0.1, 0.2, 0.3, 0.4, 0.5].map(|s| Hue { shift: s }).to_vec(),
        _ => return None,
    };
    Some(v.into_iter().enumerate().map(|(i, d)| DistortionSpec::new(d, 2000 + i as u64)).collect())
}

pub fn load_grid(path: &Path) -> Result<Vec<DistortionSpec>, DistortionError> {
    let text = std::fs::read_to_string(path).map_err(|e| DistortionError::Io(format!("{}: {e}", path.display())))?;
    let grid: Vec<DistortionSpec> =
        serde_json::from_str(&text).map_err(|e| DistortionError::Io(format!("{}: {e}", path.display())))?;
    for spec in &grid {
        spec.validate(DistortionPhase::Testing)?;
    }
    Ok(grid)
}

pub fn save_grid(path: &Path, grid: &[DistortionSpec]) -> Result<(), DistortionError> {
    let text = serde_json::to_string_pretty(grid).map_err(|e| DistortionError::Io(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| DistortionError::Io(format!("{}: {e}", path.display())))
}
