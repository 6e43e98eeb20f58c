use alloc::vec::Vec;

use crate::data::tokenizer::Tokenizer;
use crate::error::{bail, Result};
use crate::eval::{accuracy, argmax, embed_images, embed_texts, ClassificationTask};
use crate::model::{normalize_rows, DualEncoder};
use crate::real::Real;
use crate::tensor::Tensor;

/// Prompt ensembling: normalize each prompt embedding, average per class, re-normalize.
pub fn classifier_from_prompt_embeddings(per_class: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    if per_class.is_empty() {
        bail!(Validation, "no classes to build a classifier for");
    }
    let d = per_class[0].last_dim();
    let mut rows = Vec::with_capacity(per_class.len());
    for (c, prompts) in per_class.iter().enumerate() {
        if prompts.rows() == 0 || prompts.last_dim() != d {
            bail!(Shape, "class {} has prompt embeddings of shape {:?}", c, prompts.shape());
        }
        let unit = normalize_rows(prompts)?;
        let mut mean = alloc::vec![0.0; d];
        for r in 0..unit.rows() {
            mean.iter_mut().zip(unit.row(r)).for_each(|(m, v)| *m += v);
        }
        let k = unit.rows() as f64;
        rows.push(mean.into_iter().map(|v| v / k).collect::<Vec<_>>());
    }
    normalize_rows(&Tensor::from_rows(&rows)?)
}

/// `C × d` unit class vectors from every filled template.
pub fn build_zero_shot_classifier<T: Real>(model: &DualEncoder<T>, task: &ClassificationTask, tokenizer: &Tokenizer) -> Result<Tensor<f64>> {
    task.validate()?;
    let mut per_class = Vec::with_capacity(task.class_names.len());
    for name in &task.class_names {
        let prompts: Vec<_> = task.prompt_templates.iter().map(|t| t.replace("{}", name)).collect();
        let refs: Vec<&str> = prompts.iter().map(|s| s.as_str()).collect();
        per_class.push(embed_texts(model, tokenizer, &refs)?);
    }
    classifier_from_prompt_embeddings(&per_class)
}

/// Row-wise argmax of `scores`, lowest index on ties.
pub fn predict(scores: &Tensor<f64>) -> Vec<usize> {
    (0..scores.rows()).map(|r| argmax(scores.row(r))).collect()
}

/// Predicted class per image embedding by cosine against unit class vectors.
pub fn zero_shot_predictions(image_embeddings: &Tensor<f64>, classifier: &Tensor<f64>) -> Result<Vec<usize>> {
    let img = normalize_rows(image_embeddings)?;
    Ok(predict(&img.matmul(&classifier.transpose())?))
}

pub fn zero_shot_accuracy<T: Real>(model: &DualEncoder<T>, classifier: &Tensor<f64>, task: &ClassificationTask) -> Result<f64> {
    if task.examples.is_empty() {
        bail!(Validation, "zero-shot task has no examples");
    }
    task.validate()?;
    if classifier.rows() != task.class_names.len() {
        bail!(Shape, "classifier has {} rows for {} classes", classifier.rows(), task.class_names.len());
    }
    let images: Vec<_> = task.examples.iter().map(|e| &e.0).collect();
    let emb = embed_images(model, &images)?;
    accuracy(&zero_shot_predictions(&emb, classifier)?, &task.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_prompts_average_to_the_diagonal() {
        let e = Tensor::new(&[2, 2], alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = classifier_from_prompt_embeddings(&[e]).unwrap();
        let h = core::f64::consts::FRAC_1_SQRT_2;
        assert!((c.data()[0] - h).abs() < 1e-12 && (c.data()[1] - h).abs() < 1e-12);
    }

    #[test]
    fn missing_slot_is_rejected() {
        let task = ClassificationTask {
            class_names: alloc::vec!["a".into()],
            prompt_templates: alloc::vec!["a photo".into()],
            examples: Vec::new(),
        };
        assert!(task.validate().is_err());
    }
}
