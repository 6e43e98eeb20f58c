//! Procedurally rendered shape/color corpus with templated captions.
//!
//! Every pair is a pure function of `(seed, index)`, so the corpus is random
//! access and needs no storage until it is written to shards.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::image::RgbImage;
use crate::error::{bail, Result};
use crate::eval::CROP_FRACTION;
use crate::rng::{mix_seed, Rng};

pub const SHAPES: [&str; 8] = ["bar", "column", "circle", "cross", "square", "triangle", "diamond", "ring"];
pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [230, 210, 40]),
    ("purple", [150, 60, 190]),
    ("orange", [240, 140, 30]),
    ("cyan", [40, 200, 210]),
    ("pink", [240, 120, 180]),
];
pub const CAPTION_TEMPLATES: [&str; 6] = [
    "a photo of a {}",
    "a {}",
    "a drawing of a {}",
    "a picture of the {}",
    "a {} on a gray background",
    "an image showing a {}",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    pub n_classes: usize,
    pub caption_noise: f64,
    pub seed: u64,
    #[serde(default = "default_min_size")]
    pub min_size: usize,
    #[serde(default = "default_max_size")]
    pub max_size: usize,
}

fn default_min_size() -> usize {
    64
}

fn default_max_size() -> usize {
    224
}

impl SyntheticConfig {
    pub fn new(n_pairs: usize, n_classes: usize, caption_noise: f64, seed: u64) -> Self {
        SyntheticConfig { n_pairs, n_classes, caption_noise, seed, min_size: default_min_size(), max_size: default_max_size() }
    }
}

/// One rendered pair and the ground truth it was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub pair_id: u64,
    pub image: RgbImage,
    pub caption: String,
    pub image_class: usize,
    pub caption_class: usize,
}

impl SyntheticPair {
    pub fn is_mismatched(&self) -> bool {
        self.image_class != self.caption_class
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    config: SyntheticConfig,
    colors: usize,
}

impl SyntheticCorpus {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        let n = config.n_classes;
        if n < 2 {
            bail!(Validation, "n_classes must be at least 2, got {}", n);
        }
        let colors = n.div_ceil(2).min(COLORS.len());
        if n.div_ceil(colors) > SHAPES.len() {
            bail!(Validation, "at most {} classes are available, got {}", SHAPES.len() * COLORS.len(), n);
        }
        if config.n_pairs == 0 {
            bail!(Validation, "n_pairs must be positive");
        }
        if !(0.0..=1.0).contains(&config.caption_noise) {
            bail!(Validation, "caption_noise must lie in [0, 1], got {}", config.caption_noise);
        }
        if config.min_size == 0 || config.min_size > config.max_size {
            bail!(Validation, "image size range {}..={} is empty", config.min_size, config.max_size);
        }
        Ok(SyntheticCorpus { config, colors })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.config.n_pairs
    }

    pub fn is_empty(&self) -> bool {
        self.config.n_pairs == 0
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    /// `(shape, color)` names of a class.
    pub fn class_parts(&self, class: usize) -> (&'static str, &'static str) {
        (SHAPES[class / self.colors], COLORS[class % self.colors].0)
    }

    /// Bare class label such as `"red circle"`.
    pub fn class_name(&self, class: usize) -> String {
        let (shape, color) = self.class_parts(class);
        format!("{} {}", color, shape)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes()).map(|c| self.class_name(c)).collect()
    }

    /// Class draws and caption of pair `index`, plus the stream positioned for rendering.
    fn draw(&self, index: usize) -> (Rng, usize, usize, String) {
        assert!(index < self.len(), "pair {} out of range", index);
        let mut rng = Rng::new(mix_seed(&[self.config.seed, index as u64]));
        let n = self.n_classes();
        let image_class = rng.below(n);
        let template = CAPTION_TEMPLATES[rng.below(CAPTION_TEMPLATES.len())];
        let caption_class = if rng.bernoulli(self.config.caption_noise) {
            let other = rng.below(n - 1);
            if other >= image_class { other + 1 } else { other }
        } else {
            image_class
        };
        let caption = template.replace("{}", &self.class_name(caption_class));
        (rng, image_class, caption_class, caption)
    }

    pub fn pair(&self, index: usize) -> SyntheticPair {
        let (mut rng, image_class, caption_class, caption) = self.draw(index);
        let image = self.render(image_class, &mut rng);
        SyntheticPair { pair_id: index as u64, image, caption, image_class, caption_class }
    }

    /// Caption of pair `index` without rendering its image.
    pub fn caption(&self, index: usize) -> String {
        self.draw(index).3
    }

    /// `(image_class, caption_class)` of pair `index` without rendering.
    pub fn classes(&self, index: usize) -> (usize, usize) {
        let (_, i, c, _) = self.draw(index);
        (i, c)
    }

    /// Draws the class's shape at a jittered position and scale on a noisy gray
    /// square field whose side is drawn from `min_size..=max_size`. The shape
    /// stays inside the central crop that evaluation keeps.
    pub fn render(&self, class: usize, rng: &mut Rng) -> RgbImage {
        let (lo, hi) = (self.config.min_size, self.config.max_size);
        let w = lo + rng.below(hi - lo + 1);
        let h = w;
        let side = w as f64;
        let radius = side * rng.range(0.25, 0.42);
        let margin = side * (1.0 - CROP_FRACTION) / 2.0;
        let cx = rng.range(margin + radius, w as f64 - margin - radius);
        let cy = rng.range(margin + radius, h as f64 - margin - radius);
        let bg = 96.0 + rng.uniform() * 64.0;
        let shape = class / self.colors;
        let color = COLORS[class % self.colors].1;
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5 - cx) / radius;
                let v = (y as f64 + 0.5 - cy) / radius;
                let noise = (rng.next_u64() % 17) as f64 - 8.0;
                if inside(shape, u, v) {
                    for c in color {
                        data.push((c as f64 + noise).clamp(0.0, 255.0) as u8);
                    }
                } else {
                    let g = (bg + noise).clamp(0.0, 255.0) as u8;
                    data.extend_from_slice(&[g, g, g]);
                }
            }
        }
        RgbImage { width: w, height: h, data }
    }

    /// Captions for `class` from every template, used as zero-shot prompts.
    pub fn prompts(&self, class: usize) -> Vec<String> {
        CAPTION_TEMPLATES.iter().map(|t| t.replace("{}", &self.class_name(class))).collect()
    }
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match shape {
        // A bar lies horizontally and a column stands upright.
        0 => au <= 0.95 && av <= 0.35,
        1 => av <= 0.95 && au <= 0.35,
        2 => u * u + v * v <= 1.0,
        3 => au.min(av) <= 0.3 && au.max(av) <= 0.9,
        4 => au <= 0.8 && av <= 0.8,
        5 => (-0.8..=0.8).contains(&v) && au <= 0.45 * (v + 0.8),
        6 => au + av <= 1.0,
        _ => (0.3025..=1.0).contains(&(u * u + v * v)),
    }
}
