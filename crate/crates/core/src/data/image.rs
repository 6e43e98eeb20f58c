//! Pixel buffers, bilinear resampling and the training-time preprocessing.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Format, "image must be at least 1x1, got {}x{}", width, height);
        }
        if data.len() != width * height * 3 {
            bail!(Format, "expected {} bytes of 3-channel pixels for {}x{}, got {}", width * height * 3, width, height, data.len());
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, data }
    }

    /// Builds an image from `channels`-interleaved bytes; only 3 channels are accepted.
    pub fn from_interleaved(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 3 {
            bail!(Format, "expected 3-channel pixels, got {} channels", channels);
        }
        RgbImage::new(width, height, data)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage { width: self.width, height: self.height, data: self.data.iter().map(|&v| v as f32).collect() }
    }
}

/// RGB image with `f32` channel values on the `[0, 255]` scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Axis-aligned source rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl FloatImage {
    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        FloatImage { width, height, data: vec![value; width * height * 3] }
    }

    pub fn full_rect(&self) -> CropRect {
        CropRect { x: 0.0, y: 0.0, width: self.width as f64, height: self.height as f64 }
    }

    /// Bilinear sample at continuous pixel-centre coordinates, clamped to the border.
    pub fn sample(&self, x: f64, y: f64, out: &mut [f32; 3]) {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = libm::floor(x) as usize;
        let y0 = libm::floor(y) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        for (c, slot) in out.iter_mut().enumerate() {
            let at = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * 3 + c];
            let (a, b) = (at(x0, y0), at(x1, y0));
            let (d, e) = (at(x0, y1), at(x1, y1));
            // Lerp form keeps constant regions exactly constant.
            let top = a + (b - a) * fx;
            let bottom = d + (e - d) * fx;
            *slot = top + (bottom - top) * fy;
        }
    }

    /// Bilinear resample of `rect` into a `width × height` image, optionally mirrored.
    pub fn resample(&self, rect: CropRect, width: usize, height: usize, flip: bool) -> FloatImage {
        let sx = rect.width / width as f64;
        let sy = rect.height / height as f64;
        let mut data = Vec::with_capacity(width * height * 3);
        let mut px = [0.0f32; 3];
        for oy in 0..height {
            let y = rect.y + (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..width {
                let col = if flip { width - 1 - ox } else { ox };
                let x = rect.x + (col as f64 + 0.5) * sx - 0.5;
                self.sample(x, y, &mut px);
                data.extend_from_slice(&px);
            }
        }
        FloatImage { width, height, data }
    }

    pub fn resize(&self, width: usize, height: usize) -> FloatImage {
        self.resample(self.full_rect(), width, height, false)
    }

    pub fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    }

    /// Maps `[0, 255]` to `[-1, 1]` via `v / 127.5 - 1` as an `[H, W, 3]` tensor.
    pub fn to_normalized<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v.clamp(0.0, 255.0) as f64 / 127.5 - 1.0)).collect();
        Tensor::new(&[self.height, self.width, 3], data).expect("image buffer matches its shape")
    }
}

/// Resizes to `resolution × resolution` bilinearly and normalizes to `[-1, 1]`.
pub fn preprocess_image<T: Real>(raw: &RgbImage, resolution: usize) -> Result<Tensor<T>> {
    if raw.data.len() != raw.width * raw.height * 3 {
        bail!(Format, "image buffer is not 3-channel");
    }
    Ok(raw.to_float().resize(resolution, resolution).to_normalized())
}

/// Stacks `[H, W, 3]` tensors into a `[B, H, W, 3]` batch.
pub fn stack_images<T: Real>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    Tensor::stack(images)
}
