//! Paired encoders and the shared embedding space.

mod layers;
mod spec;
mod vision;

use alloc::format;
use alloc::vec::Vec;

pub use spec::{DualEncoderConfig, EncoderFamily, EncoderSpec, PRESET_NAMES};
pub use vision::patchify;

use crate::data::tokenizer::PAD_ID;
use crate::error::{bail, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::model::layers::{trunc_normal, Block, Linear, Mlp, Norm, INIT_STD};
use crate::model::vision::VisionTower;
use crate::objectives::KeptPatches;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Upper bound of the exponentiated logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
/// Initial temperature; the stored parameter is `ln(1 / INIT_TEMPERATURE)`.
pub const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Debug)]
struct TextTower {
    token_embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: Norm,
}

impl TextTower {
    fn new<T: Real>(config: &DualEncoderConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let spec = &config.text;
        let d = spec.width;
        let token_embed = store.add("text.token_embed", trunc_normal(&[config.vocab_size, d], INIT_STD, rng));
        let pos = store.add("text.pos_embed", trunc_normal(&[config.context_length, d], INIT_STD, rng));
        let blocks = (0..spec.depth)
            .map(|i| Block::new(store, &format!("text.block{i}"), d, spec.heads, spec.mlp_hidden(), rng))
            .collect();
        let ln = Norm::new(store, "text.ln_final", d);
        TextTower { token_embed, pos, blocks, ln }
    }

    /// Representation at the final non-padding position of each sequence.
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize], rows: usize, len: usize) -> Result<Var> {
        let table = g.param(self.token_embed);
        let x = g.gather(table, ids)?;
        let d = g.shape(x)[1];
        let x = g.reshape(x, &[rows, len, d])?;
        let pos = g.param(self.pos);
        let mut x = g.add_broadcast(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        let x = self.ln.forward(g, x)?;
        let x = g.reshape(x, &[rows * len, d])?;
        let pool: Vec<usize> = (0..rows)
            .map(|r| {
                let seq = &ids[r * len..(r + 1) * len];
                r * len + seq.iter().rposition(|&t| t != PAD_ID as usize).unwrap_or(0)
            })
            .collect();
        g.gather(x, &pool)
    }
}

/// Two-layer head mapping pooled vision features into the self-supervised space.
#[derive(Clone, Debug)]
struct SslHead {
    mlp: Mlp,
}

/// Vision and text towers, their projections, and the learnable temperature.
#[derive(Clone, Debug)]
pub struct DualEncoder<T> {
    config: DualEncoderConfig,
    params: ParamStore<T>,
    vision: VisionTower,
    vision_proj: Linear,
    text: TextTower,
    text_proj: Linear,
    logit_scale: ParamId,
    ssl_head: Option<SslHead>,
}

impl<T: Real> DualEncoder<T> {
    /// Builds a freshly initialized model.
    pub fn build(config: &DualEncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let vision = VisionTower::new(&config.vision, &mut params, &mut rng)?;
        let vf = config.vision.feature_dim();
        let vision_proj = Linear::new(&mut params, "vision.proj", vf, config.projection_dim, false, libm::pow(vf as f64, -0.5), &mut rng);
        let text = TextTower::new(config, &mut params, &mut rng);
        let td = config.text.width;
        let text_proj = Linear::new(&mut params, "text.proj", td, config.projection_dim, false, libm::pow(td as f64, -0.5), &mut rng);
        let logit_scale = params.add("logit_scale", Tensor::scalar(T::of(libm::log(1.0 / INIT_TEMPERATURE))));
        let ssl_head = config.ssl_head_dim.map(|out| SslHead {
            mlp: Mlp::new(&mut params, "ssl_head", vf, config.ssl_hidden_dim(), out, &mut rng),
        });
        Ok(DualEncoder { config: config.clone(), params, vision, vision_proj, text, text_proj, logit_scale, ssl_head })
    }

    /// Rebuilds the model structure and installs `params` (for example from a checkpoint).
    pub fn from_params(config: &DualEncoderConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = DualEncoder::build(config, 0)?;
        if params.len() != model.params.len() {
            bail!(Validation, "checkpoint has {} tensors, model expects {}", params.len(), model.params.len());
        }
        for id in model.params.ids() {
            let want = model.params.get(id);
            let name = model.params.name(id);
            let Some(src) = params.find(name) else {
                bail!(Validation, "checkpoint is missing tensor `{}`", name);
            };
            if params.get(src).shape() != want.shape() {
                bail!(Validation, "tensor `{}` has shape {:?}, expected {:?}", name, params.get(src).shape(), want.shape());
            }
        }
        let mut installed = ParamStore::new();
        for id in model.params.ids() {
            let name = model.params.name(id);
            let src = params.find(name).expect("checked above");
            installed.add(name, params.get(src).clone());
        }
        model.params = installed;
        Ok(model)
    }

    pub fn config(&self) -> &DualEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn projection_dim(&self) -> usize {
        self.config.projection_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Number of patch tokens the vision tower sees for an unmasked image.
    pub fn num_patch_tokens(&self) -> usize {
        self.config.vision.num_patches()
    }

    pub fn has_ssl_head(&self) -> bool {
        self.ssl_head.is_some()
    }

    /// Pooled vision features `[B, feature_dim]` (before projection).
    pub fn image_features(&self, g: &mut Graph<'_, T>, images: &Tensor<T>, kept: Option<&KeptPatches>) -> Result<Var> {
        self.vision.forward(g, &self.config.vision, images, kept)
    }

    /// Projected image embeddings `[B, projection_dim]`.
    pub fn image_embeddings(&self, g: &mut Graph<'_, T>, images: &Tensor<T>, kept: Option<&KeptPatches>) -> Result<Var> {
        let f = self.image_features(g, images, kept)?;
        self.vision_proj.forward(g, f)
    }

    /// Projected text embeddings `[N, projection_dim]`.
    pub fn text_embeddings(&self, g: &mut Graph<'_, T>, tokens: &[Vec<u32>]) -> Result<Var> {
        let ids = self.check_tokens(tokens)?;
        let f = self.text.forward(g, &ids, tokens.len(), self.config.context_length)?;
        self.text_proj.forward(g, f)
    }

    /// Self-supervised head applied to pooled vision features.
    pub fn ssl_embeddings(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let Some(head) = &self.ssl_head else {
            bail!(Config, "model was built without a self-supervised head");
        };
        head.mlp.forward(g, features)
    }

    /// `min(exp(logit_scale), 100)` as a graph node.
    pub fn logit_scale(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let s = g.param(self.logit_scale);
        g.exp_clamped(s, MAX_LOGIT_SCALE)
    }

    pub fn logit_scale_value(&self) -> f64 {
        libm::exp(self.params.get(self.logit_scale).data()[0].as_f64()).min(MAX_LOGIT_SCALE)
    }

    pub fn logit_scale_param(&self) -> ParamId {
        self.logit_scale
    }

    /// Inference-mode image embeddings.
    pub fn encode_image(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference(&self.params);
        let e = self.image_embeddings(&mut g, images, None)?;
        Ok(g.value(e).clone())
    }

    /// Inference-mode pooled vision features.
    pub fn encode_image_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference(&self.params);
        let e = self.image_features(&mut g, images, None)?;
        Ok(g.value(e).clone())
    }

    /// Inference-mode text embeddings for rows of exactly `context_length` ids.
    pub fn encode_text(&self, tokens: &[Vec<u32>]) -> Result<Tensor<T>> {
        let mut g = Graph::inference(&self.params);
        let e = self.text_embeddings(&mut g, tokens)?;
        Ok(g.value(e).clone())
    }

    fn check_tokens(&self, tokens: &[Vec<u32>]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            bail!(Shape, "empty token batch");
        }
        let len = self.config.context_length;
        let mut ids = Vec::with_capacity(tokens.len() * len);
        for (r, row) in tokens.iter().enumerate() {
            if row.len() != len {
                bail!(Shape, "token row {} has length {}, expected {}", r, row.len(), len);
            }
            for (c, &t) in row.iter().enumerate() {
                if t as usize >= self.config.vocab_size {
                    bail!(Validation, "token id {} at ({}, {}) is outside the vocabulary of {}", t, r, c, self.config.vocab_size);
                }
                ids.push(t as usize);
            }
        }
        Ok(ids)
    }
}

/// Image and text embeddings of one batch plus the exponentiated logit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub image_embeddings: Tensor<f64>,
    pub text_embeddings: Tensor<f64>,
    pub logit_scale_value: f64,
}

/// Row-wise L2 normalization; a zero row is a numeric error naming its index.
pub fn normalize_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    let d = x.last_dim();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            bail!(Numeric, "row {} has zero or non-finite norm", r);
        }
        row.iter_mut().for_each(|v| *v /= n);
        debug_assert_eq!(row.len(), d);
    }
    Ok(out)
}

/// `logits[i][j] = scale · cos(image_i, text_j)`.
pub fn similarity_logits(batch: &EmbeddingBatch) -> Result<Tensor<f64>> {
    if batch.image_embeddings.shape().len() != 2
        || batch.text_embeddings.shape().len() != 2
        || batch.image_embeddings.last_dim() != batch.text_embeddings.last_dim()
    {
        bail!(
            Shape,
            "embedding batches {:?} and {:?} do not share a joint space",
            batch.image_embeddings.shape(),
            batch.text_embeddings.shape()
        );
    }
    let img = normalize_rows(&batch.image_embeddings)?;
    let txt = normalize_rows(&batch.text_embeddings)?;
    let logits = img.matmul(&txt.transpose())?;
    Ok(logits.map(|v| v * batch.logit_scale_value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DualEncoderConfig {
        DualEncoderConfig::new(EncoderSpec::vit(8, 1, 16, 2, 16), EncoderSpec::text(1, 16, 2), 8, 32)
    }

    fn batch(rows: &[&[f64]], cols: usize) -> Tensor<f64> {
        Tensor::new(&[rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn similarity_of_identical_orthonormal_rows_is_identity() {
        let e = batch(&[&[1.0, 0.0], &[0.0, 1.0]], 2);
        let b = EmbeddingBatch { image_embeddings: e.clone(), text_embeddings: e, logit_scale_value: 1.0 };
        assert_eq!(similarity_logits(&b).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        let b2 = EmbeddingBatch { logit_scale_value: 2.0, ..b };
        assert_eq!(similarity_logits(&b2).unwrap().data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn similarity_hand_example() {
        let b = EmbeddingBatch {
            image_embeddings: batch(&[&[1.0, 0.0], &[0.0, 1.0]], 2),
            text_embeddings: batch(&[&[0.6, 0.8], &[1.0, 0.0]], 2),
            logit_scale_value: 1.0,
        };
        let l = similarity_logits(&b).unwrap();
        let want = [0.6, 1.0, 0.8, 0.0];
        for (a, w) in l.data().iter().zip(want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_zero_row_is_reported() {
        let b = EmbeddingBatch {
            image_embeddings: batch(&[&[1.0, 0.0], &[0.0, 0.0]], 2),
            text_embeddings: batch(&[&[0.6, 0.8], &[1.0, 0.0]], 2),
            logit_scale_value: 1.0,
        };
        let err = similarity_logits(&b).unwrap_err();
        assert!(format!("{err}").contains("row 1"));
    }

    #[test]
    fn logit_scale_starts_at_clip_temperature() {
        let m = DualEncoder::<f32>::build(&tiny_config(), 0).unwrap();
        assert!((m.logit_scale_value() - 1.0 / 0.07).abs() < 1e-3);
    }

    #[test]
    fn wrong_resolution_is_a_shape_error() {
        let m = DualEncoder::<f32>::build(&tiny_config(), 0).unwrap();
        let err = m.encode_image(&Tensor::zeros(&[1, 24, 24, 3])).unwrap_err();
        assert!(format!("{err}").contains("16x16x3"), "{err}");
    }

    #[test]
    fn token_contract_errors() {
        let m = DualEncoder::<f32>::build(&tiny_config(), 0).unwrap();
        let short = alloc::vec![alloc::vec![1u32; 15]];
        assert!(matches!(m.encode_text(&short), Err(crate::Error::Shape(_))));
        let mut row = alloc::vec![1u32; 16];
        row[5] = 32;
        let err = m.encode_text(&[row]).unwrap_err();
        assert!(matches!(err, crate::Error::Validation(ref s) if s.contains("(0, 5)")), "{err}");
    }

    #[test]
    fn built_parameter_count_matches_analytic() {
        for (v, t) in [("vit_pico", "text_pico"), ("vit_nano", "text_nano"), ("mixer_nano", "text_pico"), ("cnn_nano", "text_pico")] {
            let mut c = DualEncoderConfig::from_presets(v, t, 32, 512).unwrap();
            c.ssl_head_dim = Some(16);
            let m = DualEncoder::<f32>::build(&c, 1).unwrap();
            assert_eq!(m.parameter_count(), c.parameter_count(), "{v}");
        }
    }

    #[test]
    fn from_params_round_trips() {
        let c = tiny_config();
        let m = DualEncoder::<f32>::build(&c, 3).unwrap();
        let copy = DualEncoder::from_params(&c, m.params().clone()).unwrap();
        let img = Tensor::from_fn(&[2, 16, 16, 3], |i| ((i % 13) as f32) / 13.0 - 0.5);
        assert_eq!(m.encode_image(&img).unwrap(), copy.encode_image(&img).unwrap());
    }
}
