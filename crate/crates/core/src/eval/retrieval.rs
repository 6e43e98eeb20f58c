use crate::data::tokenizer::Tokenizer;
use crate::error::{bail, Result};
use crate::eval::{argmax, embed_images, embed_texts, RetrievalTask};
use crate::model::DualEncoder;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallAt1 {
    /// Images whose top-ranked caption describes them.
    pub text_retrieval: f64,
    /// Captions whose top-ranked image is their ground truth.
    pub image_retrieval: f64,
}

/// Recall@1 in both directions from an `[images, captions]` similarity matrix.
pub fn recall_at_1_from_similarity(sim: &Tensor<f64>, caption_image: &[usize]) -> Result<RecallAt1> {
    let (ni, nc) = (sim.rows(), sim.last_dim());
    if sim.shape().len() != 2 || ni == 0 || nc == 0 {
        bail!(Shape, "similarity matrix of shape {:?}", sim.shape());
    }
    if caption_image.len() != nc {
        bail!(Validation, "{} captions but {} ground-truth entries", nc, caption_image.len());
    }
    if let Some(j) = caption_image.iter().position(|&i| i >= ni) {
        bail!(Validation, "caption {} points at image {} of {}", j, caption_image[j], ni);
    }
    let text_hits = (0..ni).filter(|&i| caption_image[argmax(sim.row(i))] == i).count();
    let t = sim.transpose();
    let image_hits = (0..nc).filter(|&j| argmax(t.row(j)) == caption_image[j]).count();
    Ok(RecallAt1 { text_retrieval: text_hits as f64 / ni as f64, image_retrieval: image_hits as f64 / nc as f64 })
}

pub fn retrieval_recall_at_1<T: Real>(model: &DualEncoder<T>, task: &RetrievalTask, tokenizer: &Tokenizer) -> Result<RecallAt1> {
    task.validate()?;
    let images: alloc::vec::Vec<_> = task.images.iter().collect();
    let captions: alloc::vec::Vec<&str> = task.captions.iter().map(|c| c.as_str()).collect();
    let sim = embed_images(model, &images)?.matmul(&embed_texts(model, tokenizer, &captions)?.transpose())?;
    let gt: alloc::vec::Vec<usize> = task.caption_image.iter().map(|g| g.unwrap_or(usize::MAX)).collect();
    recall_at_1_from_similarity(&sim, &gt)
}
