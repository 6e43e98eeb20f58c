use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::image::{preprocess_image, RgbImage};
use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::model::{DualEncoder, DualEncoderConfig};
use crate::objectives::{strategy_loss, strategy_step_inputs, StepPair, StepSeed, StrategyConfig, StrategyKind};
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;
use crate::train::flops::estimate_gflops_per_sample;
use crate::train::optim::{Optimizer, OptimizerConfig};
use crate::train::record::{RunRecord, StepMetrics};
use crate::train::source::ExampleSource;

pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_CHECKPOINT_EVERY: usize = 500;

const ORDER_STREAM: u64 = 0x6f72_6465_72;
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub run_id: String,
    pub dataset_name: String,
    pub model: DualEncoderConfig,
    pub strategy: StrategyConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the run at a step count instead of whole epochs (fixed-sampled-data sweeps).
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    DEFAULT_CHECKPOINT_EVERY
}

impl TrainConfig {
    pub fn new(model: DualEncoderConfig, strategy: StrategyConfig, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            run_id: String::from("run"),
            dataset_name: String::from("dataset"),
            model,
            strategy,
            optimizer: OptimizerConfig::default(),
            batch_size,
            epochs,
            max_steps: None,
            seed,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
        }
    }

    /// Model configuration actually trained: SLIP gets an SSL head sized like the projection if none is set.
    pub fn effective_model(&self) -> DualEncoderConfig {
        let mut m = self.model.clone();
        if self.strategy.kind == StrategyKind::Slip && m.ssl_head_dim.is_none() {
            m.ssl_head_dim = Some(m.projection_dim);
        }
        m
    }

    pub fn effective_batch(&self) -> usize {
        self.strategy.effective_batch(self.batch_size)
    }

    pub fn steps_per_epoch(&self, dataset_size: usize) -> Result<usize> {
        let eb = self.effective_batch();
        if eb < 2 {
            bail!(Validation, "batch size must be at least 2, got {}", eb);
        }
        let spe = dataset_size / eb;
        if spe == 0 {
            bail!(Validation, "dataset of {} pairs is smaller than one batch of {}", dataset_size, eb);
        }
        Ok(spe)
    }

    pub fn total_steps(&self, dataset_size: usize) -> Result<usize> {
        let spe = self.steps_per_epoch(dataset_size)?;
        Ok(self.max_steps.unwrap_or(self.epochs * spe))
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_model().validate()?;
        self.strategy.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 && self.max_steps.is_none() {
            bail!(Config, "epochs must be positive");
        }
        if self.max_steps == Some(0) {
            bail!(Config, "max_steps must be positive");
        }
        if self.checkpoint_every == 0 {
            bail!(Config, "checkpoint_every must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointPoint {
    pub step: usize,
    pub epoch: usize,
    pub end_of_epoch: bool,
    pub final_step: bool,
}

/// Hooks for logging and checkpointing; all methods default to doing nothing.
pub trait TrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _model: &DualEncoder<f32>, _point: CheckpointPoint) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

pub struct TrainedRun {
    pub model: DualEncoder<f32>,
    pub record: RunRecord,
}

/// Trains from a fresh initialization. Everything random (init, order,
/// augmentation, masking) derives from `config.seed`.
pub fn train<S: ExampleSource + ?Sized>(config: &TrainConfig, source: &S, observer: &mut dyn TrainObserver) -> Result<TrainedRun> {
    config.validate()?;
    let n = source.len();
    if n == 0 {
        bail!(Validation, "training set is empty");
    }
    let model_cfg = config.effective_model();
    let spe = config.steps_per_epoch(n)?;
    let total = config.total_steps(n)?;
    let eb = config.effective_batch();
    let mut opt_cfg = config.optimizer.clone();
    if opt_cfg.total_steps == 0 {
        opt_cfg.total_steps = total;
    }
    let gflops_per_sample = estimate_gflops_per_sample(&model_cfg, &config.strategy)?;

    let mut model = DualEncoder::<f32>::build(&model_cfg, mix_seed(&[config.seed, INIT_STREAM]))?;
    let mut opt = Optimizer::new(opt_cfg.clone(), model.params())?;

    let res = model_cfg.vision.input_resolution;
    let tokens: Vec<Vec<u32>> = (0..n).map(|i| source.tokens(i)).collect::<Result<_>>()?;
    let ids: Vec<u64> = (0..n).map(|i| source.pair_id(i)).collect();
    let kind = config.strategy.kind;
    let needs_plain = kind != StrategyKind::ClipDa;
    let needs_raw = matches!(kind, StrategyKind::ClipDa | StrategyKind::Slip);
    let plain: Vec<Tensor<f32>> = if needs_plain {
        (0..n).map(|i| preprocess_image(&source.image(i)?, res)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut series = Vec::with_capacity(total);
    let mut sampled: u64 = 0;
    let mut step = 0usize;
    let mut last_loss = f64::NAN;
    let mut epoch = 0usize;
    while step < total {
        let order = Rng::new(mix_seed(&[config.seed, epoch as u64, ORDER_STREAM])).permutation(n);
        for s in 0..spe {
            if step == total {
                break;
            }
            let batch = &order[s * eb..(s + 1) * eb];
            let raws: Vec<RgbImage> = if needs_raw {
                batch.iter().map(|&i| source.image(i)).collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let pairs: Vec<StepPair<'_>> = batch
                .iter()
                .enumerate()
                .map(|(j, &i)| StepPair {
                    example_id: ids[i],
                    raw: raws.get(j),
                    plain: plain.get(i),
                    tokens: &tokens[i],
                })
                .collect();
            let seed = StepSeed { run_seed: config.seed, epoch: epoch as u64 };
            let prepared = strategy_step_inputs::<f32>(&pairs, &config.strategy, &model_cfg.vision, seed)?;
            let (grads, loss, clip, ssl) = {
                let mut g = Graph::new(model.params());
                let out = strategy_loss(&mut g, &model, &prepared, &config.strategy)?;
                let loss = g.value(out.total).data()[0] as f64;
                if !loss.is_finite() {
                    bail!(Numeric, "loss became non-finite at step {}", step);
                }
                let clip = g.value(out.clip).data()[0] as f64;
                let ssl = out.ssl.map(|v| g.value(v).data()[0] as f64);
                (g.backward(out.total)?, loss, clip, ssl)
            };
            let lr = opt_cfg.learning_rate(step)?;
            opt.update(model.params_mut(), &grads, lr)?;
            step += 1;
            sampled += eb as u64;
            last_loss = loss;
            let m = StepMetrics {
                step,
                epoch,
                loss,
                lr,
                sampled_so_far: sampled,
                clip_loss: ssl.map(|_| clip),
                ssl_loss: ssl,
                logit_scale: model.logit_scale_value(),
            };
            observer.on_step(&m)?;
            series.push(m);
            let end_of_epoch = s + 1 == spe;
            if step % config.checkpoint_every == 0 || end_of_epoch || step == total {
                let point = CheckpointPoint { step, epoch, end_of_epoch, final_step: step == total };
                observer.on_checkpoint(&model, point)?;
            }
        }
        epoch += 1;
    }

    let record = RunRecord {
        run_id: config.run_id.clone(),
        strategy: config.strategy.clone(),
        model: model_cfg,
        dataset_name: config.dataset_name.clone(),
        dataset_size: n,
        quality_tier: None,
        epochs: epoch,
        batch_size: config.batch_size,
        steps: step,
        sampled_data_count: sampled,
        gflops_per_sample,
        total_gflops: gflops_per_sample * sampled as f64,
        final_loss: last_loss,
        checkpoint_path: None,
        metric_series: series,
        eval: Default::default(),
    };
    Ok(TrainedRun { model, record })
}
