use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::DualEncoderConfig;
use crate::objectives::StrategyConfig;

/// Logged after every optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub sampled_so_far: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl_loss: Option<f64>,
    pub logit_scale: f64,
}

/// Immutable summary of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub strategy: StrategyConfig,
    pub model: DualEncoderConfig,
    pub dataset_name: String,
    pub dataset_size: usize,
    /// Keep fraction of the quality tier the run trained on, if filtered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_tier: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub sampled_data_count: u64,
    pub gflops_per_sample: f64,
    pub total_gflops: f64,
    pub final_loss: f64,
    #[serde(default)]
    pub checkpoint_path: Option<String>,
    #[serde(default)]
    pub metric_series: Vec<StepMetrics>,
    /// Evaluation results keyed by `task/metric`.
    #[serde(default)]
    pub eval: BTreeMap<String, f64>,
}

impl RunRecord {
    /// `total_gflops == gflops_per_sample × sampled_data_count` within 1e-6 relative.
    pub fn verify_compute_identity(&self) -> Result<()> {
        let want = self.gflops_per_sample * self.sampled_data_count as f64;
        let rel = (self.total_gflops - want).abs() / want.abs().max(f64::MIN_POSITIVE);
        if rel > 1e-6 {
            bail!(Accounting, "total_gflops {} differs from {} x {}", self.total_gflops, self.gflops_per_sample, self.sampled_data_count);
        }
        Ok(())
    }
}
