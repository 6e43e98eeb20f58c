//! Analytic compute accounting. Only matrix products are counted (`2mnk`),
//! including the attention `T²d` products; training multiplies by 3.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::{DualEncoderConfig, EncoderFamily, EncoderSpec};
use crate::objectives::{kept_count, StrategyConfig, StrategyKind};

pub const TRAIN_MULTIPLIER: f64 = 3.0;

/// Forward-pass FLOPs of one tower for one example, split by how they scale with tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TowerFlops {
    /// Token-proportional work outside the blocks (patch embedding, stems).
    pub embed: f64,
    /// Token-proportional work inside the blocks (QKV/O projections, MLPs, convolutions).
    pub block_linear: f64,
    /// Attention score and mixing products, quadratic in tokens.
    pub quadratic: f64,
    /// Per-example work after pooling (projections, heads).
    pub head: f64,
}

impl TowerFlops {
    pub fn token_linear(&self) -> f64 {
        self.embed + self.block_linear
    }

    pub fn total(&self) -> f64 {
        self.embed + self.block_linear + self.quadratic + self.head
    }
}

/// Per-example forward FLOPs of every branch a strategy runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub vision: TowerFlops,
    pub text: TowerFlops,
    /// Extra SSL views (two full vision passes plus the SSL head).
    pub ssl: TowerFlops,
}

impl FlopsBreakdown {
    pub fn forward_total(&self) -> f64 {
        self.vision.total() + self.text.total() + self.ssl.total()
    }

    /// Forward + backward GFLOPs per example.
    pub fn training_gflops_per_sample(&self) -> f64 {
        TRAIN_MULTIPLIER * self.forward_total() / 1e9
    }
}

fn transformer(tokens: f64, d: f64, hidden: f64, depth: f64) -> (f64, f64) {
    let linear = depth * (4.0 * 2.0 * tokens * d * d + 2.0 * 2.0 * tokens * d * hidden);
    let quadratic = depth * 2.0 * (2.0 * tokens * tokens * d);
    (linear, quadratic)
}

/// Forward FLOPs of the vision tower with `tokens` visible patches (ViT only may differ from the full count).
pub fn vision_tower_flops(spec: &EncoderSpec, tokens: usize) -> Result<TowerFlops> {
    let d = spec.width as f64;
    match spec.family {
        EncoderFamily::Vit => {
            let t = tokens as f64;
            let (block_linear, quadratic) = transformer(t, d, spec.mlp_hidden() as f64, spec.depth as f64);
            Ok(TowerFlops { embed: 2.0 * t * spec.patch_dim() as f64 * d, block_linear, quadratic, head: 0.0 })
        }
        EncoderFamily::MlpMixer => {
            if tokens != spec.num_patches() {
                bail!(Accounting, "layer `mixer.token_mlp` has a fixed token count and cannot drop patches");
            }
            let s = tokens as f64;
            let per_layer = 2.0 * 2.0 * d * s * spec.token_mlp_hidden() as f64 + 2.0 * 2.0 * s * d * spec.mlp_hidden() as f64;
            Ok(TowerFlops {
                embed: 2.0 * s * spec.patch_dim() as f64 * d,
                block_linear: spec.depth as f64 * per_layer,
                quadratic: 0.0,
                head: 0.0,
            })
        }
        EncoderFamily::CnnResnetStyle => {
            if tokens != spec.num_patches() {
                bail!(Accounting, "layer `cnn.conv` operates on dense grids and cannot drop patches");
            }
            let stem = spec.cnn_stem();
            let conv = |size: usize, k: usize, cin: usize, cout: usize| 2.0 * (size * size * k * k * cin * cout) as f64;
            let mut size = spec.input_resolution.div_ceil(stem.stride);
            let embed = conv(size, stem.kernel, 3, spec.width);
            if stem.pool {
                size /= 2;
            }
            let mut block_linear = 0.0;
            let mut channels = spec.width;
            for (stage, &count) in spec.stage_blocks.iter().enumerate() {
                let mid = spec.width << stage;
                let out = 4 * mid;
                for i in 0..count {
                    let input = size;
                    if i == 0 && stage > 0 {
                        size = (size - 1) / 2 + 1;
                    }
                    block_linear += conv(input, 1, channels, mid) + conv(size, 3, mid, mid) + conv(size, 1, mid, out);
                    if i == 0 {
                        block_linear += conv(size, 1, channels, out);
                    }
                    channels = out;
                }
            }
            Ok(TowerFlops { embed, block_linear, quadratic: 0.0, head: 0.0 })
        }
    }
}

/// Analytic per-example training cost of `strategy` on `model`.
pub fn estimate_flops(model: &DualEncoderConfig, strategy: &StrategyConfig) -> Result<FlopsBreakdown> {
    model.validate()?;
    strategy.validate()?;
    let v = &model.vision;
    let p = v.num_patches();
    let tokens = if strategy.kind == StrategyKind::Flip {
        if v.family != EncoderFamily::Vit {
            bail!(Accounting, "patch masking has no cost model for `{}` layers", v.family.name());
        }
        kept_count(p, strategy.mask_ratio)?
    } else {
        p
    };
    let proj = model.projection_dim as f64;
    let feat = v.feature_dim() as f64;
    let mut vision = vision_tower_flops(v, tokens)?;
    vision.head = 2.0 * feat * proj;

    let t = &model.text;
    let (block_linear, quadratic) =
        transformer(model.context_length as f64, t.width as f64, t.mlp_hidden() as f64, t.depth as f64);
    let text = TowerFlops { embed: 0.0, block_linear, quadratic, head: 2.0 * t.width as f64 * proj };

    let ssl = if strategy.kind == StrategyKind::Slip {
        let Some(out) = model.ssl_head_dim else {
            bail!(Accounting, "slip needs the `ssl_head` layer, but the model has none");
        };
        let full = vision_tower_flops(v, p)?;
        let hidden = model.ssl_hidden_dim() as f64;
        TowerFlops {
            embed: 2.0 * full.embed,
            block_linear: 2.0 * full.block_linear,
            quadratic: 2.0 * full.quadratic,
            head: 2.0 * (2.0 * feat * hidden + 2.0 * hidden * out as f64),
        }
    } else {
        TowerFlops::default()
    };
    Ok(FlopsBreakdown { vision, text, ssl })
}

/// Shorthand for `estimate_flops(..).training_gflops_per_sample()`.
pub fn estimate_gflops_per_sample(model: &DualEncoderConfig, strategy: &StrategyConfig) -> Result<f64> {
    Ok(estimate_flops(model, strategy)?.training_gflops_per_sample())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_b32_forward_is_near_canonical() {
        // ViT-B/32 at 224 is commonly quoted at about 4.4 GMACs, i.e. 8.8 GFLOPs.
        let f = vision_tower_flops(&EncoderSpec::preset("vit_b32").unwrap(), 49).unwrap();
        let g = f.total() / 1e9;
        assert!((8.0..9.5).contains(&g), "{g}");
    }

    #[test]
    fn mixer_cannot_be_masked() {
        let cfg = DualEncoderConfig::from_presets("mixer_nano", "text_nano", 32, 64).unwrap();
        assert!(matches!(estimate_flops(&cfg, &StrategyConfig::flip(0.5)), Err(crate::Error::Accounting(_))));
    }
}
