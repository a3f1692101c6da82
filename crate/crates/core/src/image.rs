//! RGB images with `f32` samples in `[0, 1]`, stored row-major HWC.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;
use zwm_nn::{Real, Tensor};

/// Side length every network in this crate consumes.
pub const IMAGE_SIDE: usize = 128;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image data has {got} samples, expected {want} for {height}x{width}x3")]
    Shape { height: usize, width: usize, got: usize, want: usize },
    #[error("image contains non-finite samples")]
    NonFinite,
    #[error("image io: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        let want = height * width * 3;
        if data.len() != want || height == 0 || width == 0 {
            return Err(ImageError::Shape { height, width, got: data.len(), want });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite);
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; height * width * 3] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn is_canonical(&self) -> bool {
        self.height == IMAGE_SIDE && self.width == IMAGE_SIDE
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// SHA-256 over the raw sample bits; changes iff any sample changes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("consistent buffer size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self { height: img.height() as usize, width: img.width() as usize, data }
    }

    /// Loads any PNG/JPEG and resamples it to the canonical square size.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|e| ImageError::Io(format!("{}: {e}", path.display())))?;
        let rgb = img.to_rgb8();
        let rgb = if rgb.width() as usize != IMAGE_SIDE || rgb.height() as usize != IMAGE_SIDE {
            image::imageops::resize(&rgb, IMAGE_SIDE as u32, IMAGE_SIDE as u32, image::imageops::FilterType::Triangle)
        } else {
            rgb
        };
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| ImageError::Io(format!("{}: {e}", path.display())))
    }
}

/// Stacks images into an NHWC tensor.
pub fn batch_tensor<T: Real>(images: &[&Image]) -> Tensor<T> {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "batch images must share a size");
        data.extend(img.data.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(&[images.len(), h, w, 3], data)
}

/// Splits an NHWC tensor back into images.
pub fn unbatch<T: Real>(t: &Tensor<T>) -> Vec<Image> {
    let &[b, h, w, c] = t.shape() else { panic!("expected NHWC tensor") };
    assert_eq!(c, 3);
    t.data()
        .chunks(h * w * 3)
        .take(b)
        .map(|chunk| Image { height: h, width: w, data: chunk.iter().map(|v| v.as_f64() as f32).collect() })
        .collect()
}
