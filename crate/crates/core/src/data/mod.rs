//! Pairs, manifests, preprocessing, tokenization, filtering and the synthetic corpus.

pub mod filter;
pub mod image;
pub mod synthetic;
pub mod tokenizer;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use filter::{ceil_fraction, ks_distance, pair_scores, quality_filter, sample_subset, score_pairs, PairMeta};
pub use image::{preprocess_image, FloatImage, RgbImage};
pub use synthetic::{SyntheticConfig, SyntheticCorpus, SyntheticPair};
pub use tokenizer::Tokenizer;

use crate::error::{bail, Result};

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTextPair {
    pub pair_id: u64,
    pub image: RgbImage,
    pub caption: String,
    pub quality_score: Option<f64>,
}

impl ImageTextPair {
    pub fn meta(&self) -> PairMeta {
        PairMeta { pair_id: self.pair_id, quality_score: self.quality_score }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.quality_score {
            if !(-1.0..=1.0).contains(&s) {
                bail!(Validation, "pair {} has quality score {} outside [-1, 1]", self.pair_id, s);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub path: String,
    pub records: usize,
}

/// A named dataset split over ordered shard files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub pair_count: usize,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_tier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    pub shards: Vec<ShardEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.shards.iter().map(|s| s.records).sum();
        if total != self.pair_count {
            bail!(Validation, "manifest `{}` declares {} pairs but its shards hold {}", self.name, self.pair_count, total);
        }
        if let Some(t) = self.quality_tier {
            if !(t > 0.0 && t <= 1.0) {
                bail!(Validation, "quality tier {} is outside (0, 1]", t);
            }
        }
        Ok(())
    }

    pub fn shard_paths(&self) -> impl Iterator<Item = &str> {
        self.shards.iter().map(|s| s.path.as_str())
    }
}

/// Rejects duplicate pair ids.
pub fn check_unique_ids(ids: impl IntoIterator<Item = u64>) -> Result<()> {
    let mut seen = alloc::collections::BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            bail!(Validation, "duplicate pair_id {}", id);
        }
    }
    Ok(())
}
