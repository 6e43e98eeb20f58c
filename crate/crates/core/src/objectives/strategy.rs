use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::image::RgbImage;
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{DualEncoder, EncoderSpec};
use crate::objectives::augment::{augment, ssl_view, AugmentationPolicy};
use crate::objectives::loss::{clip_loss_graph, logits_graph, nt_xent_graph, slip_combine_graph};
use crate::objectives::mask::{kept_count, KeptPatches};
use crate::real::Real;
use crate::rng::{example_seed, mix_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Clip,
    Slip,
    Flip,
    ClipDa,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Clip => "clip",
            StrategyKind::Slip => "slip",
            StrategyKind::Flip => "flip",
            StrategyKind::ClipDa => "clip_da",
        }
    }
}

pub const DEFAULT_MASK_RATIO: f64 = 0.5;
pub const DEFAULT_SSL_WEIGHT: f64 = 1.0;
pub const DEFAULT_SSL_TEMPERATURE: f64 = 0.1;

/// Training objective and its strategy-specific knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStrategy", into = "RawStrategy")]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub mask_ratio: f64,
    pub ssl_weight: f64,
    pub ssl_temperature: f64,
    pub augmentation: AugmentationPolicy,
    pub batch_multiplier: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStrategy {
    kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ssl_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ssl_temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    augmentation: Option<AugmentationPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    batch_multiplier: Option<usize>,
}

impl TryFrom<RawStrategy> for StrategyConfig {
    type Error = Error;

    fn try_from(raw: RawStrategy) -> Result<Self> {
        let mut c = StrategyConfig::defaults(raw.kind);
        let only = |field: &str, allowed: StrategyKind| -> Result<()> {
            if raw.kind != allowed {
                bail!(Config, "`{}` only applies to strategy `{}`, not `{}`", field, allowed.name(), raw.kind.name());
            }
            Ok(())
        };
        if let Some(r) = raw.mask_ratio {
            only("mask_ratio", StrategyKind::Flip)?;
            c.mask_ratio = r;
        }
        if let Some(w) = raw.ssl_weight {
            only("ssl_weight", StrategyKind::Slip)?;
            c.ssl_weight = w;
        }
        if let Some(t) = raw.ssl_temperature {
            only("ssl_temperature", StrategyKind::Slip)?;
            c.ssl_temperature = t;
        }
        if let Some(a) = raw.augmentation {
            only("augmentation", StrategyKind::ClipDa)?;
            c.augmentation = a;
        }
        if let Some(m) = raw.batch_multiplier {
            c.batch_multiplier = m;
        }
        c.validate()?;
        Ok(c)
    }
}

impl From<StrategyConfig> for RawStrategy {
    fn from(c: StrategyConfig) -> Self {
        let d = StrategyConfig::defaults(c.kind);
        let is = |k: StrategyKind| c.kind == k;
        RawStrategy {
            kind: c.kind,
            mask_ratio: is(StrategyKind::Flip).then_some(c.mask_ratio),
            ssl_weight: is(StrategyKind::Slip).then_some(c.ssl_weight),
            ssl_temperature: is(StrategyKind::Slip).then_some(c.ssl_temperature),
            augmentation: is(StrategyKind::ClipDa).then_some(c.augmentation),
            batch_multiplier: (c.batch_multiplier != d.batch_multiplier).then_some(c.batch_multiplier),
        }
    }
}

impl StrategyConfig {
    fn defaults(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            mask_ratio: DEFAULT_MASK_RATIO,
            ssl_weight: DEFAULT_SSL_WEIGHT,
            ssl_temperature: DEFAULT_SSL_TEMPERATURE,
            augmentation: AugmentationPolicy::None,
            batch_multiplier: if kind == StrategyKind::Flip { 2 } else { 1 },
        }
    }

    pub fn clip() -> Self {
        StrategyConfig::defaults(StrategyKind::Clip)
    }

    pub fn slip() -> Self {
        StrategyConfig::defaults(StrategyKind::Slip)
    }

    pub fn flip(mask_ratio: f64) -> Self {
        StrategyConfig { mask_ratio, ..StrategyConfig::defaults(StrategyKind::Flip) }
    }

    pub fn clip_da(augmentation: AugmentationPolicy) -> Self {
        StrategyConfig { augmentation, ..StrategyConfig::defaults(StrategyKind::ClipDa) }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            StrategyKind::Flip if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) => {
                bail!(Config, "flip needs 0 < mask_ratio < 1, got {}", self.mask_ratio)
            }
            StrategyKind::ClipDa if self.augmentation == AugmentationPolicy::None => {
                bail!(Config, "clip_da needs an augmentation policy other than `none`")
            }
            StrategyKind::Slip if !(self.ssl_weight >= 0.0 && self.ssl_weight.is_finite()) => {
                bail!(Config, "ssl_weight must be nonnegative, got {}", self.ssl_weight)
            }
            StrategyKind::Slip if !(self.ssl_temperature > 0.0 && self.ssl_temperature.is_finite()) => {
                bail!(Config, "ssl_temperature must be positive, got {}", self.ssl_temperature)
            }
            _ => {}
        }
        if self.batch_multiplier == 0 {
            bail!(Config, "batch_multiplier must be positive");
        }
        Ok(())
    }

    /// Examples drawn per optimizer step for a base batch size.
    pub fn effective_batch(&self, base: usize) -> usize {
        base * self.batch_multiplier
    }

    /// Short label such as `flip(0.5)` or `clip_da(crop_flip)`.
    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::Clip => "clip".into(),
            StrategyKind::Slip => format!("slip(w={})", self.ssl_weight),
            StrategyKind::Flip => format!("flip({})", self.mask_ratio),
            StrategyKind::ClipDa => format!("clip_da({})", self.augmentation.name()),
        }
    }

    pub fn loss_plan(&self) -> Vec<LossTerm> {
        match self.kind {
            StrategyKind::Slip => alloc::vec![LossTerm::ClipLoss, LossTerm::SslNtXent, LossTerm::SlipCombine],
            _ => alloc::vec![LossTerm::ClipLoss],
        }
    }
}

/// Named loss ops a prepared batch feeds, in evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    ClipLoss,
    SslNtXent,
    SlipCombine,
}

/// One example as the step builder sees it. `plain` is the cached,
/// unaugmented preprocessing; `raw` is needed by augmenting strategies.
#[derive(Clone, Copy, Debug)]
pub struct StepPair<'a> {
    pub example_id: u64,
    pub raw: Option<&'a RgbImage>,
    pub plain: Option<&'a Tensor<f32>>,
    pub tokens: &'a [u32],
}

/// Seeds for one step: every example derives its own stream from these and its id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepSeed {
    pub run_seed: u64,
    pub epoch: u64,
}

const VIEW_A: u64 = 1;
const VIEW_B: u64 = 2;
const MASK_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch<T> {
    pub images: Tensor<T>,
    pub tokens: Vec<Vec<u32>>,
    pub kept: Option<KeptPatches>,
    pub ssl_views: Option<(Tensor<T>, Tensor<T>)>,
    pub plan: Vec<LossTerm>,
}

impl<T> PreparedBatch<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn plain_image<T: Real>(pair: &StepPair<'_>, resolution: usize) -> Result<Tensor<T>> {
    match (pair.plain, pair.raw) {
        (Some(t), _) => Ok(t.cast()),
        (None, Some(raw)) => augment(raw, AugmentationPolicy::None, 0, resolution),
        (None, None) => bail!(Validation, "pair {} carries no image", pair.example_id),
    }
}

fn raw_image<'a>(pair: &StepPair<'a>, kind: StrategyKind) -> Result<&'a RgbImage> {
    match pair.raw {
        Some(r) => Ok(r),
        None => bail!(Validation, "strategy `{}` needs the raw image of pair {}", kind.name(), pair.example_id),
    }
}

/// Turns a drawn batch into model inputs for `config`. The batch is already
/// the effective batch (`batch_multiplier` × base).
pub fn strategy_step_inputs<T: Real>(
    pairs: &[StepPair<'_>],
    config: &StrategyConfig,
    vision: &EncoderSpec,
    seed: StepSeed,
) -> Result<PreparedBatch<T>> {
    config.validate()?;
    if pairs.len() < 2 {
        bail!(Validation, "a contrastive step needs at least 2 pairs, got {}", pairs.len());
    }
    let res = vision.input_resolution;
    let ex_seed = |p: &StepPair<'_>| example_seed(seed.run_seed, seed.epoch, p.example_id);
    let tokens: Vec<Vec<u32>> = pairs.iter().map(|p| p.tokens.to_vec()).collect();

    let mut imgs = Vec::with_capacity(pairs.len());
    for p in pairs {
        imgs.push(match config.kind {
            StrategyKind::ClipDa => augment(raw_image(p, config.kind)?, config.augmentation, ex_seed(p), res)?,
            _ => plain_image(p, res)?,
        });
    }
    let images = Tensor::stack(&imgs)?;

    let kept = if config.kind == StrategyKind::Flip {
        if !vision.family.supports_patch_masking() {
            bail!(Config, "flip needs a patch-token vision encoder, not `{}`", vision.family.name());
        }
        let patches = vision.num_patches();
        let k = kept_count(patches, config.mask_ratio)?;
        let mut indices = Vec::with_capacity(pairs.len() * k);
        for p in pairs {
            indices.extend(Rng::new(mix_seed(&[ex_seed(p), MASK_STREAM])).sample_sorted(patches, k));
        }
        Some(KeptPatches { per_example: k, indices })
    } else {
        None
    };

    let ssl_views = if config.kind == StrategyKind::Slip {
        let mut a = Vec::with_capacity(pairs.len());
        let mut b = Vec::with_capacity(pairs.len());
        for p in pairs {
            let raw = raw_image(p, config.kind)?;
            a.push(ssl_view(raw, mix_seed(&[ex_seed(p), VIEW_A]), res)?);
            b.push(ssl_view(raw, mix_seed(&[ex_seed(p), VIEW_B]), res)?);
        }
        Some((Tensor::stack(&a)?, Tensor::stack(&b)?))
    } else {
        None
    };

    Ok(PreparedBatch { images, tokens, kept, ssl_views, plan: config.loss_plan() })
}

/// Graph nodes of one step's objective.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub clip: Var,
    pub ssl: Option<Var>,
}

/// Runs the towers on a prepared batch and combines the planned losses.
pub fn strategy_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &DualEncoder<T>,
    batch: &PreparedBatch<T>,
    config: &StrategyConfig,
) -> Result<StepLoss> {
    let img = model.image_embeddings(g, &batch.images, batch.kept.as_ref())?;
    let txt = model.text_embeddings(g, &batch.tokens)?;
    let scale = model.logit_scale(g)?;
    let logits = logits_graph(g, img, txt, scale)?;
    let clip = clip_loss_graph(g, logits)?;
    let mut out = StepLoss { total: clip, clip, ssl: None };
    for term in &batch.plan {
        match term {
            LossTerm::ClipLoss => {}
            LossTerm::SslNtXent => {
                let Some((va, vb)) = &batch.ssl_views else {
                    bail!(Validation, "plan asks for an SSL term but the batch has no views");
                };
                let fa = model.image_features(g, va, None)?;
                let fb = model.image_features(g, vb, None)?;
                let za = model.ssl_embeddings(g, fa)?;
                let zb = model.ssl_embeddings(g, fb)?;
                out.ssl = Some(nt_xent_graph(g, za, zb, config.ssl_temperature)?);
            }
            LossTerm::SlipCombine => {
                let Some(ssl) = out.ssl else {
                    bail!(Validation, "slip combine before the SSL term");
                };
                out.total = slip_combine_graph(g, clip, ssl, config.ssl_weight)?;
            }
        }
    }
    Ok(out)
}
