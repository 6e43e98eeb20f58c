//! Evaluation protocols: zero-shot classification, linear and few-shot
//! probes, and cross-modal Recall@1.

pub mod preprocess;
pub mod probe;
pub mod retrieval;
pub mod zero_shot;

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::image::RgbImage;
use crate::data::tokenizer::Tokenizer;
use crate::error::{bail, Result};
use crate::model::{normalize_rows, DualEncoder};
use crate::real::Real;
use crate::tensor::Tensor;

pub use preprocess::{crop_geometry, eval_preprocess, resize_side, CROP_FRACTION};
pub use probe::{
    default_lr_grid, few_shot_accuracy, few_shot_accuracy_features, linear_probe, linear_probe_features, train_linear_classifier,
    FewShotMethod, GridPoint, LinearClassifier, ProbeConfig, ProbeResult, FEW_SHOT_EPOCHS, FEW_SHOT_LR, FEW_SHOT_RESAMPLES,
};
pub use retrieval::{recall_at_1_from_similarity, retrieval_recall_at_1, RecallAt1};
pub use zero_shot::{
    build_zero_shot_classifier, classifier_from_prompt_embeddings, predict, zero_shot_accuracy, zero_shot_predictions,
};

/// Images per inference batch during embedding extraction.
pub const EVAL_BATCH: usize = 256;

/// Class names, prompt templates with a `{}` slot, and labeled images.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationTask {
    pub class_names: Vec<String>,
    pub prompt_templates: Vec<String>,
    pub examples: Vec<(RgbImage, usize)>,
}

impl ClassificationTask {
    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            bail!(Validation, "classification task has no classes");
        }
        if self.prompt_templates.is_empty() {
            bail!(Validation, "classification task has no prompt templates");
        }
        if let Some(t) = self.prompt_templates.iter().find(|t| !t.contains("{}")) {
            bail!(Validation, "prompt template {:?} has no {{}} slot", t);
        }
        check_labels(self.examples.iter().map(|e| e.1), self.class_names.len())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.1).collect()
    }
}

/// Train/test labeled images for probing.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitTask {
    pub class_names: Vec<String>,
    pub train: Vec<(RgbImage, usize)>,
    pub test: Vec<(RgbImage, usize)>,
}

impl SplitTask {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            bail!(Validation, "probe task needs nonempty train and test splits");
        }
        check_labels(self.train.iter().chain(&self.test).map(|e| e.1), self.class_names.len())
    }
}

/// Images, captions, and the image each caption describes.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalTask {
    pub images: Vec<RgbImage>,
    pub captions: Vec<String>,
    pub caption_image: Vec<Option<usize>>,
}

impl RetrievalTask {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.captions.is_empty() {
            bail!(Validation, "retrieval task needs at least one image and one caption");
        }
        if self.caption_image.len() != self.captions.len() {
            bail!(Validation, "{} captions but {} ground-truth entries", self.captions.len(), self.caption_image.len());
        }
        for (j, gt) in self.caption_image.iter().enumerate() {
            match gt {
                None => bail!(Validation, "caption {} has no ground-truth image", j),
                Some(i) if *i >= self.images.len() => bail!(Validation, "caption {} points at image {} of {}", j, i, self.images.len()),
                _ => {}
            }
        }
        Ok(())
    }
}

fn check_labels(labels: impl Iterator<Item = usize>, n_classes: usize) -> Result<()> {
    for (i, c) in labels.enumerate() {
        if c >= n_classes {
            bail!(Validation, "example {} has class {} but only {} classes exist", i, c, n_classes);
        }
    }
    Ok(())
}

fn batched<T: Real>(
    model: &DualEncoder<T>,
    images: &[&RgbImage],
    f: impl Fn(&DualEncoder<T>, &Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<f64>> {
    if images.is_empty() {
        bail!(Validation, "no images to embed");
    }
    let res = model.config().vision.input_resolution;
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in images.chunks(EVAL_BATCH) {
        let pixels: Vec<Tensor<T>> = chunk.iter().map(|img| eval_preprocess(img, res)).collect::<Result<_>>()?;
        let out = f(model, &Tensor::stack(&pixels)?)?;
        width = out.last_dim();
        rows.extend(out.data().iter().map(|v| v.as_f64()));
    }
    Tensor::new(&[images.len(), width], rows)
}

/// Unit-norm projected image embeddings `[N, d]`.
pub fn embed_images<T: Real>(model: &DualEncoder<T>, images: &[&RgbImage]) -> Result<Tensor<f64>> {
    normalize_rows(&batched(model, images, |m, x| m.encode_image(x))?)
}

/// Pooled, unprojected vision features `[N, feature_dim]`.
pub fn image_features<T: Real>(model: &DualEncoder<T>, images: &[&RgbImage]) -> Result<Tensor<f64>> {
    batched(model, images, |m, x| m.encode_image_features(x))
}

/// Unit-norm projected text embeddings `[N, d]`.
pub fn embed_texts<T: Real>(model: &DualEncoder<T>, tokenizer: &Tokenizer, texts: &[&str]) -> Result<Tensor<f64>> {
    if texts.is_empty() {
        bail!(Validation, "no texts to embed");
    }
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in texts.chunks(EVAL_BATCH) {
        let ids: Vec<Vec<u32>> = chunk.iter().map(|t| tokenizer.tokenize(t)).collect();
        let out = model.encode_text(&ids)?;
        width = out.last_dim();
        rows.extend(out.data().iter().map(|v| v.as_f64()));
    }
    normalize_rows(&Tensor::new(&[texts.len(), width], rows)?)
}

/// Index of the largest value; ties and NaNs resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        bail!(Validation, "{} predictions for {} labels", predictions.len(), labels.len());
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
