use alloc::vec::Vec;

use crate::data::image::{FloatImage, RgbImage};
use crate::error::{bail, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Fraction of the resized short side kept by the central crop.
pub const CROP_FRACTION: f64 = 0.875;
pub const MIN_EVAL_SIDE: usize = 8;

/// Short side after the pre-crop resize, e.g. 256 for a 224 target.
pub fn resize_side(target: usize) -> usize {
    libm::round(target as f64 / CROP_FRACTION) as usize
}

/// Resized `(width, height)` and the crop's `(x, y)` offset for a `width × height` input.
pub fn crop_geometry(width: usize, height: usize, target: usize) -> ((usize, usize), (usize, usize)) {
    let side = resize_side(target);
    let (sw, sh) = if width <= height {
        (side, libm::round(height as f64 * side as f64 / width as f64) as usize)
    } else {
        (libm::round(width as f64 * side as f64 / height as f64) as usize, side)
    };
    ((sw, sh), ((sw - target) / 2, (sh - target) / 2))
}

/// Resize the short side to `target / 0.875`, take the central `target × target`
/// crop and map to [-1, 1].
pub fn eval_preprocess<T: Real>(raw: &RgbImage, target: usize) -> Result<Tensor<T>> {
    if raw.data.len() != raw.width * raw.height * 3 {
        bail!(Format, "image buffer is not 3-channel");
    }
    if raw.width < MIN_EVAL_SIDE || raw.height < MIN_EVAL_SIDE {
        bail!(Format, "image of {}x{} is smaller than {} px", raw.width, raw.height, MIN_EVAL_SIDE);
    }
    if target == 0 {
        bail!(Validation, "target resolution must be positive");
    }
    let ((sw, sh), (ox, oy)) = crop_geometry(raw.width, raw.height, target);
    let resized = raw.to_float().resize(sw, sh);
    let mut data = Vec::with_capacity(target * target * 3);
    for y in 0..target {
        let start = ((oy + y) * sw + ox) * 3;
        data.extend_from_slice(&resized.data[start..start + target * 3]);
    }
    Ok(FloatImage { width: target, height: target, data }.to_normalized())
}
