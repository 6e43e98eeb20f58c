use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::DEFAULT_RESOLUTION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    Vit,
    CnnResnetStyle,
    MlpMixer,
}

impl EncoderFamily {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "vit" => EncoderFamily::Vit,
            "cnn_resnet_style" | "cnn" | "resnet" => EncoderFamily::CnnResnetStyle,
            "mlp_mixer" | "mixer" => EncoderFamily::MlpMixer,
            other => bail!(Config, "unsupported encoder family `{}`", other),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderFamily::Vit => "vit",
            EncoderFamily::CnnResnetStyle => "cnn_resnet_style",
            EncoderFamily::MlpMixer => "mlp_mixer",
        }
    }

    /// Families whose input is a set of patch tokens that can be subsampled.
    pub fn supports_patch_masking(self) -> bool {
        matches!(self, EncoderFamily::Vit)
    }
}

fn default_resolution() -> usize {
    DEFAULT_RESOLUTION
}

/// Declarative description of one encoder tower.
///
/// Text towers use the `vit` family (a plain transformer) and ignore
/// `patch_size` and `input_resolution`. CNN towers are bottleneck residual
/// networks: `width` is the stem width, `stage_blocks` the number of blocks per
/// stage and `depth` their total.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub family: EncoderFamily,
    #[serde(default)]
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    #[serde(default)]
    pub heads: usize,
    #[serde(default = "default_resolution")]
    pub input_resolution: usize,
    /// Hidden width of the transformer or channel MLP (defaults to `4 * width`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_dim: Option<usize>,
    /// Hidden width of the mixer token-mixing MLP (defaults to `width / 2`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_mlp_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage_blocks: Vec<usize>,
}

/// Names accepted by [`EncoderSpec::preset`].
pub const PRESET_NAMES: &[&str] = &[
    "vit_ti16",
    "vit_s16",
    "vit_b32",
    "vit_b16",
    "vit_l16",
    "mixer_b32",
    "resnet50",
    "text_base",
    "vit_nano",
    "vit_pico",
    "mixer_nano",
    "cnn_nano",
    "text_nano",
    "text_pico",
];

impl EncoderSpec {
    pub fn vit(patch_size: usize, depth: usize, width: usize, heads: usize, input_resolution: usize) -> Self {
        EncoderSpec {
            family: EncoderFamily::Vit,
            patch_size,
            depth,
            width,
            heads,
            input_resolution,
            mlp_dim: None,
            token_mlp_dim: None,
            stage_blocks: Vec::new(),
        }
    }

    pub fn text(depth: usize, width: usize, heads: usize) -> Self {
        EncoderSpec::vit(0, depth, width, heads, 0)
    }

    pub fn mixer(patch_size: usize, depth: usize, width: usize, input_resolution: usize) -> Self {
        EncoderSpec { family: EncoderFamily::MlpMixer, heads: 0, ..EncoderSpec::vit(patch_size, depth, width, 0, input_resolution) }
    }

    pub fn cnn(width: usize, stage_blocks: Vec<usize>, input_resolution: usize) -> Self {
        EncoderSpec {
            family: EncoderFamily::CnnResnetStyle,
            patch_size: 0,
            depth: stage_blocks.iter().sum(),
            width,
            heads: 0,
            input_resolution,
            mlp_dim: None,
            token_mlp_dim: None,
            stage_blocks,
        }
    }

    /// Paper-scale and desk-scale presets. The `*_nano`/`*_pico` presets keep
    /// the test suite and desk experiments fast.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "vit_ti16" => EncoderSpec::vit(16, 12, 192, 3, 224),
            "vit_s16" => EncoderSpec::vit(16, 12, 384, 6, 224),
            "vit_b32" => EncoderSpec::vit(32, 12, 768, 12, 224),
            "vit_b16" => EncoderSpec::vit(16, 12, 768, 12, 224),
            "vit_l16" => EncoderSpec::vit(16, 24, 1024, 16, 224),
            "mixer_b32" => EncoderSpec {
                token_mlp_dim: Some(384),
                mlp_dim: Some(3072),
                ..EncoderSpec::mixer(32, 12, 768, 224)
            },
            "resnet50" => EncoderSpec::cnn(64, vec![3, 4, 6, 3], 224),
            "text_base" => EncoderSpec::text(12, 768, 12),
            "vit_nano" => EncoderSpec::vit(8, 2, 64, 4, 32),
            "vit_pico" => EncoderSpec::vit(8, 1, 32, 2, 32),
            "mixer_nano" => EncoderSpec::mixer(8, 2, 64, 32),
            "cnn_nano" => EncoderSpec::cnn(8, vec![1, 1], 32),
            "text_nano" => EncoderSpec::text(2, 64, 4),
            "text_pico" => EncoderSpec::text(1, 32, 2),
            other => bail!(Config, "unknown encoder preset `{}`", other),
        })
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_dim.unwrap_or(4 * self.width)
    }

    pub fn token_mlp_hidden(&self) -> usize {
        self.token_mlp_dim.unwrap_or((self.width / 2).max(1))
    }

    /// Zero for a CNN, which has no patch grid.
    pub fn patches_per_side(&self) -> usize {
        self.input_resolution.checked_div(self.patch_size).unwrap_or(0)
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Width of the pooled representation fed to the projection.
    pub fn feature_dim(&self) -> usize {
        match self.family {
            EncoderFamily::CnnResnetStyle => self.width * (1 << (self.stage_blocks.len() - 1)) * 4,
            _ => self.width,
        }
    }

    /// Checks the invariants of a vision tower.
    pub fn validate_vision(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            bail!(Config, "{} tower needs positive depth and width", self.family.name());
        }
        if self.input_resolution == 0 {
            bail!(Config, "input resolution must be positive");
        }
        match self.family {
            EncoderFamily::Vit | EncoderFamily::MlpMixer => {
                if self.patch_size == 0 || self.input_resolution % self.patch_size != 0 {
                    bail!(
                        Config,
                        "input resolution {} is not divisible by patch size {}",
                        self.input_resolution,
                        self.patch_size
                    );
                }
                if self.family == EncoderFamily::Vit {
                    self.check_heads()?;
                }
            }
            EncoderFamily::CnnResnetStyle => {
                if self.stage_blocks.is_empty() || self.stage_blocks.iter().any(|&b| b == 0) {
                    bail!(Config, "cnn tower needs at least one stage with at least one block");
                }
                if self.stage_blocks.iter().sum::<usize>() != self.depth {
                    bail!(Config, "cnn depth {} does not match stage blocks {:?}", self.depth, self.stage_blocks);
                }
                let reduction = self.cnn_stem().downsample() << (self.stage_blocks.len() - 1);
                if self.input_resolution < reduction {
                    bail!(Config, "input resolution {} too small for {} stages", self.input_resolution, self.stage_blocks.len());
                }
            }
        }
        Ok(())
    }

    /// Checks the invariants of a text tower.
    pub fn validate_text(&self) -> Result<()> {
        if self.family != EncoderFamily::Vit {
            bail!(Config, "text tower must be a transformer, got family `{}`", self.family.name());
        }
        if self.depth == 0 || self.width == 0 {
            bail!(Config, "text tower needs positive depth and width");
        }
        self.check_heads()
    }

    fn check_heads(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            bail!(Config, "width {} is not divisible by {} heads", self.width, self.heads);
        }
        Ok(())
    }

    pub(crate) fn cnn_stem(&self) -> CnnStem {
        if self.input_resolution >= 112 {
            CnnStem { kernel: 7, stride: 2, pool: true }
        } else {
            CnnStem { kernel: 3, stride: 1, pool: false }
        }
    }

    /// Analytic parameter count of a vision tower including its projection.
    pub fn vision_parameter_count(&self, projection_dim: usize) -> usize {
        let d = self.width;
        let proj = self.feature_dim() * projection_dim;
        match self.family {
            EncoderFamily::Vit => {
                let embed = self.patch_dim() * d + d + self.num_patches() * d;
                embed + self.depth * transformer_block_params(d, self.mlp_hidden()) + 2 * d + proj
            }
            EncoderFamily::MlpMixer => {
                let s = self.num_patches();
                let ds = self.token_mlp_hidden();
                let dc = self.mlp_hidden();
                let layer = 2 * d + (s * ds + ds + ds * s + s) + 2 * d + (d * dc + dc + dc * d + d);
                self.patch_dim() * d + d + self.depth * layer + 2 * d + proj
            }
            EncoderFamily::CnnResnetStyle => {
                let stem = self.cnn_stem();
                let mut total = stem.kernel * stem.kernel * 3 * d + 2 * d;
                let mut channels = d;
                for (stage, &blocks) in self.stage_blocks.iter().enumerate() {
                    let mid = d << stage;
                    let out = 4 * mid;
                    for block in 0..blocks {
                        total += channels * mid + 2 * mid + 9 * mid * mid + 2 * mid + mid * out + 2 * out;
                        if block == 0 {
                            total += channels * out + 2 * out;
                        }
                        channels = out;
                    }
                }
                total + proj
            }
        }
    }

    /// Analytic parameter count of a text tower including embeddings and projection.
    pub fn text_parameter_count(&self, vocab_size: usize, context_length: usize, projection_dim: usize) -> usize {
        let d = self.width;
        vocab_size * d + context_length * d + self.depth * transformer_block_params(d, self.mlp_hidden()) + 2 * d + d * projection_dim
    }
}

fn transformer_block_params(d: usize, hidden: usize) -> usize {
    2 * d + 4 * (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct CnnStem {
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

impl CnnStem {
    pub fn downsample(self) -> usize {
        self.stride * if self.pool { 2 } else { 1 }
    }
}

/// Paired-tower configuration shared by checkpoints and experiment files.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DualEncoderConfig {
    pub vision: EncoderSpec,
    pub text: EncoderSpec,
    pub projection_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_context")]
    pub context_length: usize,
    /// Output width of the self-supervised projection head; present only for SLIP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl_head_dim: Option<usize>,
}

fn default_context() -> usize {
    crate::CONTEXT_LENGTH
}

impl DualEncoderConfig {
    pub fn new(vision: EncoderSpec, text: EncoderSpec, projection_dim: usize, vocab_size: usize) -> Self {
        DualEncoderConfig { vision, text, projection_dim, vocab_size, context_length: crate::CONTEXT_LENGTH, ssl_head_dim: None }
    }

    pub fn from_presets(vision: &str, text: &str, projection_dim: usize, vocab_size: usize) -> Result<Self> {
        Ok(DualEncoderConfig::new(EncoderSpec::preset(vision)?, EncoderSpec::preset(text)?, projection_dim, vocab_size))
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate_vision()?;
        self.text.validate_text()?;
        if self.projection_dim == 0 || self.vocab_size == 0 || self.context_length == 0 {
            bail!(Config, "projection_dim, vocab_size and context_length must be positive");
        }
        Ok(())
    }

    pub fn ssl_hidden_dim(&self) -> usize {
        2 * self.vision.feature_dim()
    }

    /// Analytic parameter count of the whole model.
    pub fn parameter_count(&self) -> usize {
        let ssl = self.ssl_head_dim.map_or(0, |out| {
            let (f, h) = (self.vision.feature_dim(), self.ssl_hidden_dim());
            f * h + h + h * out + out
        });
        self.vision.vision_parameter_count(self.projection_dim)
            + self.text.text_parameter_count(self.vocab_size, self.context_length, self.projection_dim)
            + 1
            + ssl
    }
}
