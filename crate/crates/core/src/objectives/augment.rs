//! Image augmentation policies: random-resized crop with flip, RandAugment,
//! its stacked variant, and the SimCLR-style views used by the SSL branch.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::image::{CropRect, FloatImage, RgbImage};
use crate::error::{bail, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationPolicy {
    None,
    CropFlip,
    Randaugment,
    StackedRandaugment,
}

impl AugmentationPolicy {
    pub const ALL: [AugmentationPolicy; 4] = [
        AugmentationPolicy::None,
        AugmentationPolicy::CropFlip,
        AugmentationPolicy::Randaugment,
        AugmentationPolicy::StackedRandaugment,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "none" => AugmentationPolicy::None,
            "crop_flip" => AugmentationPolicy::CropFlip,
            "randaugment" => AugmentationPolicy::Randaugment,
            "stacked_randaugment" => AugmentationPolicy::StackedRandaugment,
            other => bail!(Config, "unknown augmentation policy `{}`", other),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentationPolicy::None => "none",
            AugmentationPolicy::CropFlip => "crop_flip",
            AugmentationPolicy::Randaugment => "randaugment",
            AugmentationPolicy::StackedRandaugment => "stacked_randaugment",
        }
    }

    fn randaugment_passes(self) -> usize {
        match self {
            AugmentationPolicy::Randaugment => 1,
            AugmentationPolicy::StackedRandaugment => 2,
            _ => 0,
        }
    }
}

pub const CROP_SCALE: (f64, f64) = (0.08, 1.0);
pub const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const RANDAUGMENT_OPS: usize = 2;
pub const RANDAUGMENT_MAGNITUDE: usize = 9;
const MAGNITUDE_BINS: usize = 31;

/// Augments `image` into a `resolution × resolution × 3` tensor in `[-1, 1]`.
pub fn augment<T: Real>(image: &RgbImage, policy: AugmentationPolicy, seed: u64, resolution: usize) -> Result<Tensor<T>> {
    check_image(image)?;
    let src = image.to_float();
    if policy == AugmentationPolicy::None {
        return Ok(src.resize(resolution, resolution).to_normalized());
    }
    let mut rng = Rng::new(seed);
    let mut img = crop_flip(&src, resolution, &mut rng);
    for _ in 0..policy.randaugment_passes() {
        randaugment(&mut img, RANDAUGMENT_OPS, RANDAUGMENT_MAGNITUDE, &mut rng);
    }
    Ok(img.to_normalized())
}

/// SimCLR-style view: crop and flip, color jitter (p 0.8), grayscale (p 0.2), blur (p 0.5).
pub fn ssl_view<T: Real>(image: &RgbImage, seed: u64, resolution: usize) -> Result<Tensor<T>> {
    check_image(image)?;
    let mut rng = Rng::new(seed);
    let mut img = crop_flip(&image.to_float(), resolution, &mut rng);
    if rng.bernoulli(0.8) {
        let mut order = [0usize, 1, 2, 3];
        rng.shuffle(&mut order);
        for op in order {
            match op {
                0 => brightness(&mut img, rng.range(0.6, 1.4)),
                1 => contrast(&mut img, rng.range(0.6, 1.4)),
                2 => saturation(&mut img, rng.range(0.6, 1.4)),
                _ => hue_shift(&mut img, rng.range(-0.1, 0.1)),
            }
        }
    }
    if rng.bernoulli(0.2) {
        saturation(&mut img, 0.0);
    }
    if rng.bernoulli(0.5) {
        // Sigma range is specified for 224 px inputs; scale it to the output size.
        let sigma = rng.range(0.1, 2.0) * resolution as f64 / 224.0;
        gaussian_blur(&mut img, sigma);
    }
    Ok(img.to_normalized())
}

fn check_image(image: &RgbImage) -> Result<()> {
    if image.width == 0 || image.height == 0 || image.data.len() != image.width * image.height * 3 {
        bail!(Format, "augment needs a nonempty 3-channel image");
    }
    Ok(())
}

/// Random-resized crop (scale `[0.08, 1]`, ratio `[3/4, 4/3]`) followed by a p=0.5 horizontal flip.
pub fn crop_flip(src: &FloatImage, resolution: usize, rng: &mut Rng) -> FloatImage {
    let rect = random_resized_rect(src.width, src.height, rng);
    let flip = rng.bernoulli(0.5);
    src.resample(rect, resolution, resolution, flip)
}

fn random_resized_rect(width: usize, height: usize, rng: &mut Rng) -> CropRect {
    let (w, h) = (width as f64, height as f64);
    let area = w * h;
    let (lr0, lr1) = (libm::log(CROP_RATIO.0), libm::log(CROP_RATIO.1));
    for _ in 0..10 {
        let target = area * rng.range(CROP_SCALE.0, CROP_SCALE.1);
        let aspect = libm::exp(rng.range(lr0, lr1));
        let cw = libm::round(libm::sqrt(target * aspect));
        let ch = libm::round(libm::sqrt(target / aspect));
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let x = rng.below((w - cw) as usize + 1) as f64;
            let y = rng.below((h - ch) as usize + 1) as f64;
            return CropRect { x, y, width: cw, height: ch };
        }
    }
    // Fallback: the largest centered crop whose aspect lies in the ratio range.
    let ratio = w / h;
    let (cw, ch) = if ratio < CROP_RATIO.0 {
        (w, libm::round(w / CROP_RATIO.0))
    } else if ratio > CROP_RATIO.1 {
        (libm::round(h * CROP_RATIO.1), h)
    } else {
        (w, h)
    };
    CropRect { x: libm::floor((w - cw) / 2.0), y: libm::floor((h - ch) / 2.0), width: cw, height: ch }
}

/// The canonical RandAugment operation list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandOp {
    Identity,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    Color,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

pub const RAND_OPS: [RandOp; 14] = [
    RandOp::Identity,
    RandOp::AutoContrast,
    RandOp::Equalize,
    RandOp::Rotate,
    RandOp::Solarize,
    RandOp::Color,
    RandOp::Posterize,
    RandOp::Contrast,
    RandOp::Brightness,
    RandOp::Sharpness,
    RandOp::ShearX,
    RandOp::ShearY,
    RandOp::TranslateX,
    RandOp::TranslateY,
];

/// `num_ops` uniformly chosen ops at `magnitude` out of 30, with random signs.
pub fn randaugment(img: &mut FloatImage, num_ops: usize, magnitude: usize, rng: &mut Rng) {
    let m = magnitude as f64 / (MAGNITUDE_BINS - 1) as f64;
    for _ in 0..num_ops {
        let op = RAND_OPS[rng.below(RAND_OPS.len())];
        let sign = if rng.bernoulli(0.5) { -1.0 } else { 1.0 };
        apply_op(img, op, m, sign);
    }
}

/// Applies `op` at magnitude fraction `m ∈ [0, 1]`; `sign` flips signed ops.
pub fn apply_op(img: &mut FloatImage, op: RandOp, m: f64, sign: f64) {
    let (w, h) = (img.width as f64, img.height as f64);
    match op {
        RandOp::Identity => {}
        RandOp::AutoContrast => auto_contrast(img),
        RandOp::Equalize => equalize(img),
        RandOp::Rotate => {
            let (s, c) = libm::sincos((30.0 * m * sign).to_radians());
            affine(img, [c, s, -s, c]);
        }
        RandOp::Solarize => {
            let threshold = 255.0 * (1.0 - m) as f32;
            img.data.iter_mut().filter(|v| **v >= threshold).for_each(|v| *v = 255.0 - *v);
        }
        RandOp::Color => saturation(img, 1.0 + 0.9 * m * sign),
        RandOp::Posterize => {
            let bits = 8 - libm::round(4.0 * m) as u32;
            let mask = !((1u32 << (8 - bits)) - 1) as u8;
            img.data.iter_mut().for_each(|v| *v = ((v.clamp(0.0, 255.0) as u8) & mask) as f32);
        }
        RandOp::Contrast => contrast(img, 1.0 + 0.9 * m * sign),
        RandOp::Brightness => brightness(img, 1.0 + 0.9 * m * sign),
        RandOp::Sharpness => sharpness(img, 1.0 + 0.9 * m * sign),
        RandOp::ShearX => affine(img, [1.0, 0.3 * m * sign, 0.0, 1.0]),
        RandOp::ShearY => affine(img, [1.0, 0.0, 0.3 * m * sign, 1.0]),
        RandOp::TranslateX => translate(img, 150.0 / 331.0 * w * m * sign, 0.0),
        RandOp::TranslateY => translate(img, 0.0, 150.0 / 331.0 * h * m * sign),
    }
    img.clamp();
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn blend(img: &mut FloatImage, other: &[f32], factor: f64) {
    let f = factor as f32;
    img.data.iter_mut().zip(other).for_each(|(v, &o)| *v = o + f * (*v - o));
    img.clamp();
}

fn brightness(img: &mut FloatImage, factor: f64) {
    let zeros = alloc::vec![0.0; img.data.len()];
    blend(img, &zeros, factor);
}

fn saturation(img: &mut FloatImage, factor: f64) {
    let gray: Vec<f32> = img.data.chunks(3).flat_map(|p| [luma(p[0], p[1], p[2]); 3]).collect();
    blend(img, &gray, factor);
}

fn contrast(img: &mut FloatImage, factor: f64) {
    let n = img.data.len() / 3;
    let mean = img.data.chunks(3).map(|p| luma(p[0], p[1], p[2]) as f64).sum::<f64>() / n as f64;
    let flat = alloc::vec![mean as f32; img.data.len()];
    blend(img, &flat, factor);
}

fn sharpness(img: &mut FloatImage, factor: f64) {
    let (w, h) = (img.width, img.height);
    let mut smooth = img.data.clone();
    if w >= 3 && h >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for c in 0..3 {
                    let mut acc = 4.0 * img.data[(y * w + x) * 3 + c];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            acc += img.data[((y + dy - 1) * w + (x + dx - 1)) * 3 + c];
                        }
                    }
                    smooth[(y * w + x) * 3 + c] = acc / 13.0;
                }
            }
        }
    }
    blend(img, &smooth, factor);
}

fn auto_contrast(img: &mut FloatImage) {
    for c in 0..3 {
        let chan = img.data.iter().skip(c).step_by(3);
        let lo = chan.clone().copied().fold(f32::INFINITY, f32::min);
        let hi = chan.copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            let scale = 255.0 / (hi - lo);
            img.data.iter_mut().skip(c).step_by(3).for_each(|v| *v = (*v - lo) * scale);
        }
    }
}

fn equalize(img: &mut FloatImage) {
    for c in 0..3 {
        let mut hist = [0usize; 256];
        for v in img.data.iter().skip(c).step_by(3) {
            hist[v.clamp(0.0, 255.0) as usize] += 1;
        }
        let last = hist.iter().rev().find(|&&n| n > 0).copied().unwrap_or(0);
        let step = (hist.iter().sum::<usize>() - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0f32; 256];
        let mut n = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (n / step).min(255) as f32;
            n += hist[i];
        }
        img.data.iter_mut().skip(c).step_by(3).for_each(|v| *v = lut[v.clamp(0.0, 255.0) as usize]);
    }
}

/// Warps about the image centre; `m` maps output offsets to source offsets. Outside pixels are black.
fn affine(img: &mut FloatImage, m: [f64; 4]) {
    let (cx, cy) = (img.width as f64 / 2.0, img.height as f64 / 2.0);
    warp(img, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + m[0] * dx + m[1] * dy, cy + m[2] * dx + m[3] * dy)
    });
}

fn translate(img: &mut FloatImage, tx: f64, ty: f64) {
    warp(img, |x, y| (x - tx, y - ty));
}

fn warp(img: &mut FloatImage, source: impl Fn(f64, f64) -> (f64, f64)) {
    let (w, h) = (img.width, img.height);
    let mut out = Vec::with_capacity(img.data.len());
    let mut px = [0f32; 3];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source(x as f64 + 0.5, y as f64 + 0.5);
            if sx < 0.0 || sy < 0.0 || sx > w as f64 || sy > h as f64 {
                out.extend_from_slice(&[0.0; 3]);
            } else {
                img.sample(sx - 0.5, sy - 0.5, &mut px);
                out.extend_from_slice(&px);
            }
        }
    }
    img.data = out;
}

fn hue_shift(img: &mut FloatImage, delta: f64) {
    for p in img.data.chunks_mut(3) {
        let (h, s, v) = rgb_to_hsv(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0);
        let h = wrap_unit(h + delta, 1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        p[0] = (r * 255.0) as f32;
        p[1] = (g * 255.0) as f32;
        p[2] = (b * 255.0) as f32;
    }
    img.clamp();
}

fn wrap_unit(x: f64, m: f64) -> f64 {
    let r = libm::fmod(x, m);
    if r < 0.0 { r + m } else { r }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        wrap_unit((g - b) / d, 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = libm::floor(h6);
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn gaussian_blur(img: &mut FloatImage, sigma: f64) {
    if sigma < 1e-3 {
        return;
    }
    let radius = libm::ceil(2.0 * sigma) as isize;
    let weights: Vec<f32> = (-radius..=radius).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)) as f32).collect();
    let total: f32 = weights.iter().sum();
    let (w, h) = (img.width as isize, img.height as isize);
    for horizontal in [true, false] {
        let src = img.data.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (k, &wt) in weights.iter().enumerate() {
                        let o = k as isize - radius;
                        let (sx, sy) = if horizontal { ((x + o).clamp(0, w - 1), y) } else { (x, (y + o).clamp(0, h - 1)) };
                        acc += wt * src[((sy * w + sx) * 3) as usize + c as usize];
                    }
                    img.data[((y * w + x) * 3) as usize + c as usize] = acc / total;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> RgbImage {
        let data = (0..w * h * 3).map(|i| (i * 7 % 256) as u8).collect();
        RgbImage::new(w, h, data).unwrap()
    }

    #[test]
    fn none_is_deterministic_resize() {
        let img = gradient_image(40, 30);
        let a: Tensor<f32> = augment(&img, AugmentationPolicy::None, 1, 32).unwrap();
        let b: Tensor<f32> = augment(&img, AugmentationPolicy::None, 2, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn black_image_stays_black_under_crop_flip() {
        let img = RgbImage::filled(50, 70, [0, 0, 0]);
        for seed in 0..20 {
            let t: Tensor<f32> = augment(&img, AugmentationPolicy::CropFlip, seed, 224).unwrap();
            assert!(t.data().iter().all(|&v| v == -1.0));
        }
    }

    #[test]
    fn every_op_keeps_pixels_in_range() {
        let src = gradient_image(16, 16).to_float();
        for op in RAND_OPS {
            for sign in [-1.0, 1.0] {
                let mut img = src.clone();
                apply_op(&mut img, op, 0.3, sign);
                assert!(img.data.iter().all(|v| (0.0..=255.0).contains(v)), "{:?}", op);
                assert_eq!(img.data.len(), src.data.len());
            }
        }
    }

    #[test]
    fn unknown_policy_is_a_config_error() {
        assert!(matches!(AugmentationPolicy::parse("mixup"), Err(crate::Error::Config(_))));
        for p in AugmentationPolicy::ALL {
            assert_eq!(AugmentationPolicy::parse(p.name()).unwrap(), p);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_rotation_is_a_no_op() {
        let mut img = gradient_image(8, 8).to_float();
        let before = img.clone();
        affine(&mut img, [1.0, 0.0, 0.0, 1.0]);
        for (a, b) in img.data.iter().zip(&before.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
