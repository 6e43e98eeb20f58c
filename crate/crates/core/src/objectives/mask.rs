use alloc::vec::Vec;

use crate::data::ceil_fraction;
use crate::error::{bail, Result};
use crate::real::Real;
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;

/// Visible patches per example: `indices` holds `per_example` ascending patch
/// indices for each example, concatenated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeptPatches {
    pub per_example: usize,
    pub indices: Vec<usize>,
}

impl KeptPatches {
    pub fn examples(&self) -> usize {
        if self.per_example == 0 { 0 } else { self.indices.len() / self.per_example }
    }

    pub fn row(&self, example: usize) -> &[usize] {
        &self.indices[example * self.per_example..(example + 1) * self.per_example]
    }

    /// Checks the selection against a batch of `batch` examples with `patches` tokens each.
    pub fn check(&self, batch: usize, patches: usize) -> Result<()> {
        if self.per_example == 0 || self.indices.len() != batch * self.per_example {
            bail!(Shape, "kept patches cover {} indices, expected {} x {}", self.indices.len(), batch, self.per_example);
        }
        for e in 0..batch {
            let row = self.row(e);
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&i| i >= patches) {
                bail!(Validation, "kept indices of example {} are not increasing within 0..{}", e, patches);
            }
        }
        Ok(())
    }
}

/// Number of patches that stay visible: `P - ceil(ratio · P)`.
pub fn kept_count(patches: usize, mask_ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&mask_ratio) {
        bail!(Validation, "mask_ratio must lie in [0, 1), got {}", mask_ratio);
    }
    if patches == 0 {
        bail!(Validation, "cannot mask an image with no patches");
    }
    let k = patches - ceil_fraction(mask_ratio, patches).min(patches);
    if k == 0 {
        bail!(Validation, "mask_ratio {} leaves no visible patch out of {}", mask_ratio, patches);
    }
    Ok(k)
}

/// Draws an independent uniform subset of visible patches for each example.
pub fn sample_kept(batch: usize, patches: usize, mask_ratio: f64, seed: u64) -> Result<KeptPatches> {
    let k = kept_count(patches, mask_ratio)?;
    let mut indices = Vec::with_capacity(batch * k);
    for e in 0..batch {
        if k == patches {
            indices.extend(0..patches);
        } else {
            indices.extend(Rng::new(mix_seed(&[seed, e as u64])).sample_sorted(patches, k));
        }
    }
    Ok(KeptPatches { per_example: k, indices })
}

/// Drops patches from `[N, P, d]` tokens, returning `[N, K, d]` and the kept indices.
pub fn mask_patches<T: Real>(tokens: &Tensor<T>, mask_ratio: f64, seed: u64) -> Result<(Tensor<T>, KeptPatches)> {
    let &[n, p, d] = tokens.shape() else {
        bail!(Shape, "patch tokens must be [N, P, d], got {:?}", tokens.shape());
    };
    let kept = sample_kept(n, p, mask_ratio, seed)?;
    let k = kept.per_example;
    let rows: Vec<usize> = kept.indices.iter().enumerate().map(|(i, &idx)| (i / k) * p + idx).collect();
    let flat = tokens.clone().reshape(&[n * p, d])?;
    let out = flat.select_rows(&rows).reshape(&[n, k, d])?;
    Ok((out, kept))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_of_49_keeps_24() {
        assert_eq!(kept_count(49, 0.5).unwrap(), 24);
        assert_eq!(kept_count(16, 0.0).unwrap(), 16);
        assert!(kept_count(4, 0.9).is_err());
        assert!(kept_count(4, 1.0).is_err());
    }

    #[test]
    fn zero_ratio_keeps_everything_in_order() {
        let t = Tensor::<f64>::from_fn(&[2, 5, 3], |i| i as f64);
        let (out, kept) = mask_patches(&t, 0.0, 4).unwrap();
        assert_eq!(out, t);
        assert_eq!(kept.row(1), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn gathered_tokens_match_indices() {
        let t = Tensor::<f64>::from_fn(&[3, 9, 2], |i| i as f64);
        let (out, kept) = mask_patches(&t, 0.5, 11).unwrap();
        assert_eq!(out.shape(), &[3, 4, 2]);
        for e in 0..3 {
            for (j, &idx) in kept.row(e).iter().enumerate() {
                assert_eq!(out.data()[(e * 4 + j) * 2], ((e * 9 + idx) * 2) as f64);
            }
        }
    }
}
