//! Score-based quality tiers and nested random subsets.

use alloc::vec::Vec;

use crate::data::image::RgbImage;
use crate::data::tokenizer::Tokenizer;
use crate::error::{bail, Result};
use crate::model::DualEncoder;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// The part of a pair that filtering and sampling look at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMeta {
    pub pair_id: u64,
    pub quality_score: Option<f64>,
}

/// `ceil(f · n)` that treats products within 1e-9 of an integer as exact.
pub fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = libm::round(x);
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        libm::ceil(x) as usize
    }
}

/// Keeps the `ceil(keep_fraction · N)` highest-scoring pairs in their original order.
/// Equal scores are ranked by ascending `pair_id`.
pub fn quality_filter(pairs: &[PairMeta], keep_fraction: f64) -> Result<Vec<PairMeta>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        bail!(Validation, "keep_fraction must lie in (0, 1], got {}", keep_fraction);
    }
    let missing = pairs.iter().filter(|p| p.quality_score.is_none()).count();
    if missing > 0 {
        bail!(Validation, "{} of {} pairs have no quality score", missing, pairs.len());
    }
    let keep = ceil_fraction(keep_fraction, pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (pairs[a].quality_score.unwrap(), pairs[b].quality_score.unwrap());
        sb.total_cmp(&sa).then(pairs[a].pair_id.cmp(&pairs[b].pair_id))
    });
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| pairs[i]).collect())
}

/// Uniform sample without replacement as a prefix of a seeded permutation,
/// so smaller subsets under one seed nest inside larger ones.
pub fn sample_subset<P: Clone>(pairs: &[P], target_count: usize, seed: u64) -> Result<Vec<P>> {
    if target_count == 0 {
        bail!(Validation, "target_count must be positive");
    }
    if target_count > pairs.len() {
        bail!(Validation, "cannot sample {} pairs from {}", target_count, pairs.len());
    }
    let perm = Rng::new(seed).permutation(pairs.len());
    Ok(perm[..target_count].iter().map(|&i| pairs[i].clone()).collect())
}

/// Row-wise cosine similarity of matched embeddings, clamped to `[-1, 1]`.
pub fn pair_scores<T: Real>(image_embeddings: &Tensor<T>, text_embeddings: &Tensor<T>) -> Result<Vec<f64>> {
    if image_embeddings.shape() != text_embeddings.shape() || image_embeddings.shape().len() != 2 {
        bail!(Shape, "score inputs {:?} and {:?} differ", image_embeddings.shape(), text_embeddings.shape());
    }
    let img = crate::model::normalize_rows(image_embeddings)?;
    let txt = crate::model::normalize_rows(text_embeddings)?;
    Ok((0..img.rows())
        .map(|r| {
            let dot: f64 = img.row(r).iter().zip(txt.row(r)).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            dot.clamp(-1.0, 1.0)
        })
        .collect())
}

/// Scorer cosine for each `(image, caption)`, in input order.
pub fn score_pairs<T: Real>(scorer: &DualEncoder<T>, tokenizer: &Tokenizer, pairs: &[(&RgbImage, &str)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(crate::eval::EVAL_BATCH) {
        let images: Vec<&RgbImage> = chunk.iter().map(|p| p.0).collect();
        let texts: Vec<&str> = chunk.iter().map(|p| p.1).collect();
        let img = crate::eval::embed_images(scorer, &images)?;
        let txt = crate::eval::embed_texts(scorer, tokenizer, &texts)?;
        out.extend(pair_scores(&img, &txt)?);
    }
    Ok(out)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scored(scores: &[f64]) -> Vec<PairMeta> {
        scores.iter().enumerate().map(|(i, &s)| PairMeta { pair_id: i as u64, quality_score: Some(s) }).collect()
    }

    #[test]
    fn keeps_the_top_half() {
        let kept = quality_filter(&scored(&[0.9, 0.5, 0.1, 0.7]), 0.5).unwrap();
        let ids: Vec<u64> = kept.iter().map(|p| p.pair_id).collect();
        assert_eq!(ids, vec![0, 3]);
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let kept = quality_filter(&scored(&[0.5, 0.5, 0.5]), 0.34).unwrap();
        assert_eq!(kept.iter().map(|p| p.pair_id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn missing_scores_are_counted() {
        let mut pairs = scored(&[0.1, 0.2, 0.3]);
        pairs[1].quality_score = None;
        pairs[2].quality_score = None;
        let err = quality_filter(&pairs, 0.5).unwrap_err();
        assert!(matches!(&err, crate::Error::Validation(m) if m.contains("2 of 3")));
    }

    #[test]
    fn ceil_fraction_is_robust_to_rounding() {
        assert_eq!(ceil_fraction(0.4, 10), 4);
        assert_eq!(ceil_fraction(0.3, 10), 3);
        assert_eq!(ceil_fraction(0.5, 49), 25);
        assert_eq!(ceil_fraction(0.2, 7), 2);
    }

    #[test]
    fn oversampling_is_rejected() {
        assert!(sample_subset(&[1, 2, 3], 4, 0).is_err());
    }

    #[test]
    fn ks_of_identical_samples_is_zero() {
        let a = [0.1, 0.4, 0.2, 0.9];
        assert_eq!(ks_distance(&a, &a), 0.0);
        assert_eq!(ks_distance(&[0.0, 0.1], &[0.5, 0.6]), 1.0);
    }
}
