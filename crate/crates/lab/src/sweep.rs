//! Sweep planning and resumable execution.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clip_lab_core::data::image::RgbImage;
use clip_lab_core::data::synthetic::SyntheticCorpus;
use clip_lab_core::data::tokenizer::Tokenizer;
use clip_lab_core::data::{quality_filter, sample_subset, ImageTextPair};
use clip_lab_core::error::Result as CoreResult;
use clip_lab_core::model::DualEncoderConfig;
use clip_lab_core::train::{estimate_gflops_per_sample, train, ExampleSource, RunRecord, SyntheticSource, TrainConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DatasetSpec, ExperimentConfig, SweepMode, TokenizerSpec};
use crate::dataset::{load_dataset, load_tokenizer, save_tokenizer, write_skip_report};
use crate::error::{write, LabError, Result};
use crate::store::{self, EvalResult, FailureRecord, RunWriter};
use crate::tasks::{build_task, run_task, Task};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSpec {
    pub run_id: String,
    pub vision: String,
    pub dataset_size: usize,
    /// `sampled_data / dataset_size`; whole numbers in epochs mode.
    pub nominal_epochs: f64,
    pub planned_sampled_data: u64,
    pub gflops_per_sample: f64,
    pub planned_gflops: f64,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Plan {
    pub runs: Vec<RunSpec>,
    /// Runs over the GFLOPs budget, with the reason.
    pub excluded: Vec<(RunSpec, String)>,
}

#[derive(Serialize)]
struct RunIdentity<'a> {
    train: &'a TrainConfig,
    dataset: &'a DatasetSpec,
    dataset_size: usize,
    tokenizer: &'a TokenizerSpec,
}

/// First 16 hex digits of the SHA-256 of the canonical JSON of everything that affects training.
pub fn run_id(train: &TrainConfig, dataset: &DatasetSpec, dataset_size: usize, tokenizer: &TokenizerSpec) -> String {
    let mut t = train.clone();
    t.run_id.clear();
    let json = serde_json::to_string(&RunIdentity { train: &t, dataset, dataset_size, tokenizer }).expect("identity serializes");
    Sha256::digest(json.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn dataset_name(spec: &DatasetSpec) -> String {
    match (&spec.manifest, &spec.synthetic) {
        (Some(m), _) => Path::new(m).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| m.clone()),
        _ => "synthetic".into(),
    }
}

fn model_vocab(cfg: &ExperimentConfig) -> Result<usize> {
    match &cfg.tokenizer.path {
        Some(p) => Ok(load_tokenizer(Path::new(p))?.vocab_size()),
        None => Ok(cfg.tokenizer.vocab_size),
    }
}

/// Cartesian product strategies × vision × dataset sizes × epochs, minus runs over budget.
pub fn plan_sweep(cfg: &ExperimentConfig) -> Result<Plan> {
    let vocab = model_vocab(cfg)?;
    let mut runs = Vec::new();
    let mut excluded = Vec::new();
    let epoch_axis: Vec<Option<usize>> = match cfg.mode {
        SweepMode::Epochs => cfg.axes.epochs.iter().map(|&e| Some(e)).collect(),
        SweepMode::FixedSamples => vec![None],
    };
    for (si, strategy) in cfg.axes.strategies.iter().enumerate() {
        for (vi, vision) in cfg.axes.vision.iter().enumerate() {
            let model = DualEncoderConfig::from_presets(vision, &cfg.text_encoder, cfg.projection_dim, vocab)
                .map_err(|e| cfg.error_at(&format!("axes.vision[{vi}]"), e.to_string()))?;
            for &size in &cfg.axes.dataset_sizes {
                for &epochs in &epoch_axis {
                    let mut train = TrainConfig::new(model.clone(), strategy.clone(), cfg.batch_size, epochs.unwrap_or(1), cfg.seed);
                    train.optimizer = cfg.optimizer.clone();
                    train.checkpoint_every = cfg.checkpoint_every;
                    train.dataset_name = dataset_name(&cfg.dataset);
                    let eb = train.effective_batch() as u64;
                    let spe = train.steps_per_epoch(size).map_err(|e| cfg.error_at("axes.dataset_sizes", e.to_string()))? as u64;
                    let (steps, nominal) = match epochs {
                        Some(e) => (spe * e as u64, e as f64),
                        None => {
                            let target = cfg.sampled_data.unwrap_or(0);
                            let steps = ((target as f64 / eb as f64).round() as u64).max(1);
                            train.max_steps = Some(steps as usize);
                            train.epochs = steps.div_ceil(spe) as usize;
                            (steps, target as f64 / size as f64)
                        }
                    };
                    let gps = estimate_gflops_per_sample(&train.effective_model(), strategy)
                        .map_err(|e| cfg.error_at(&format!("axes.strategies[{si}]"), e.to_string()))?;
                    train.run_id = run_id(&train, &cfg.dataset, size, &cfg.tokenizer);
                    let sampled = steps * eb;
                    let spec = RunSpec {
                        run_id: train.run_id.clone(),
                        vision: vision.clone(),
                        dataset_size: size,
                        nominal_epochs: nominal,
                        planned_sampled_data: sampled,
                        gflops_per_sample: gps,
                        planned_gflops: gps * sampled as f64,
                        train,
                    };
                    match cfg.budget_gflops {
                        Some(b) if spec.planned_gflops > b => {
                            let why = format!("needs {:.6e} GFLOPs, budget is {:.6e}", spec.planned_gflops, b);
                            excluded.push((spec, why));
                        }
                        _ => runs.push(spec),
                    }
                }
            }
        }
    }
    if runs.is_empty() {
        return Err(LabError::Plan(format!("no run fits the budget; {} runs were excluded", excluded.len())));
    }
    Ok(Plan { runs, excluded })
}

/// Training examples available to every run, after any quality filter.
enum Pool {
    Synthetic(SyntheticCorpus),
    Pairs(Vec<ImageTextPair>),
}

struct SubsetSource<'a> {
    pairs: &'a [ImageTextPair],
    indices: Vec<usize>,
    tokenizer: &'a Tokenizer,
}

impl ExampleSource for SubsetSource<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn pair_id(&self, index: usize) -> u64 {
        self.pairs[self.indices[index]].pair_id
    }

    fn tokens(&self, index: usize) -> CoreResult<Vec<u32>> {
        Ok(self.tokenizer.tokenize(&self.pairs[self.indices[index]].caption))
    }

    fn image(&self, index: usize) -> CoreResult<RgbImage> {
        Ok(self.pairs[self.indices[index]].image.clone())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ExecuteOptions {
    /// Skip runs whose record already exists instead of retraining them.
    pub resume: bool,
    /// Runs trained at once; 0 and 1 both mean sequential. Each run stays
    /// deterministic since runs share nothing mutable.
    pub workers: usize,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub skipped: Vec<String>,
    pub failures: Vec<(String, String)>,
    pub trained_steps: usize,
}

pub fn run_dir(cfg: &ExperimentConfig, run_id: &str) -> PathBuf {
    cfg.output_dir.join("runs").join(run_id)
}

fn prepare_pool(cfg: &ExperimentConfig) -> Result<(Pool, Vec<usize>, Vec<String>)> {
    let (pool, metas) = match (&cfg.dataset.manifest, &cfg.dataset.synthetic) {
        (Some(m), _) => {
            let data = load_dataset(Path::new(m))?;
            if !data.skipped.is_empty() {
                write_skip_report(&cfg.output_dir.join("skips.jsonl"), &data.skipped)?;
            }
            let metas: Vec<_> = data.pairs.iter().map(|p| p.meta()).collect();
            (Pool::Pairs(data.pairs), metas)
        }
        (None, Some(s)) => {
            let corpus = SyntheticCorpus::new(s.clone())?;
            let metas = (0..corpus.len()).map(|i| clip_lab_core::data::PairMeta { pair_id: i as u64, quality_score: None }).collect();
            (Pool::Synthetic(corpus), metas)
        }
        (None, None) => return Err(cfg.error_at("dataset", "no dataset source")),
    };
    let mut indices: Vec<usize> = (0..metas.len()).collect();
    if let Some(f) = cfg.dataset.keep_fraction {
        let kept: std::collections::BTreeSet<u64> = quality_filter(&metas, f)?.into_iter().map(|m| m.pair_id).collect();
        indices.retain(|&i| kept.contains(&metas[i].pair_id));
    }
    let captions = match &pool {
        Pool::Synthetic(c) => indices.iter().map(|&i| c.caption(i)).collect(),
        Pool::Pairs(p) => indices.iter().map(|&i| p[i].caption.clone()).collect(),
    };
    Ok((pool, indices, captions))
}

/// Trains and evaluates every planned run in order. A failed run is
/// recorded and the sweep moves on.
pub fn execute(cfg: &ExperimentConfig, plan: &Plan, options: ExecuteOptions) -> Result<SweepOutcome> {
    crate::error::create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("plan.json"), serde_json::to_string_pretty(plan).expect("plan serializes"))?;
    let (pool, indices, captions) = prepare_pool(cfg)?;
    let tokenizer = match &cfg.tokenizer.path {
        Some(p) => load_tokenizer(Path::new(p))?,
        None => {
            let t = Tokenizer::train(captions.iter().map(|s| s.as_str()), cfg.tokenizer.vocab_size)?;
            save_tokenizer(&cfg.output_dir.join("tokenizer.txt"), &t)?;
            t
        }
    };
    let tasks: Vec<Task> = cfg.eval.iter().map(build_task).collect::<Result<_>>()?;
    let subset_seed = cfg.dataset.subset_seed.unwrap_or(cfg.seed);

    let mut out = SweepOutcome::default();
    let mut todo = Vec::new();
    for spec in &plan.runs {
        let dir = run_dir(cfg, &spec.run_id);
        if store::is_complete(&dir) && options.resume {
            out.skipped.push(spec.run_id.clone());
            continue;
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
        }
        todo.push(spec);
    }
    let run = |spec: &RunSpec| run_one(cfg, spec, &pool, &indices, subset_seed, &tokenizer, &tasks, &run_dir(cfg, &spec.run_id));
    let results: Vec<Result<(RunRecord, usize)>> = if options.workers <= 1 {
        todo.iter().map(|s| run(s)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<(RunRecord, usize)>>>> = Mutex::new((0..todo.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..options.workers.min(todo.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(spec) = todo.get(i) else { break };
                    let r = run(spec);
                    slots.lock().expect("no worker panicked holding the lock")[i] = Some(r);
                });
            }
        });
        slots.into_inner().expect("workers finished").into_iter().map(|r| r.expect("every run was claimed")).collect()
    };
    // Records come back in plan order whatever finished first.
    let mut results = todo.iter().zip(results);
    for spec in &plan.runs {
        if out.skipped.contains(&spec.run_id) {
            out.records.push(store::read_record(&run_dir(cfg, &spec.run_id))?);
            continue;
        }
        let (_, result) = results.next().expect("one result per scheduled run");
        match result {
            Ok((record, steps)) => {
                out.trained_steps += steps;
                out.records.push(record);
            }
            Err(e) => out.failures.push((spec.run_id.clone(), e.to_string())),
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    pool: &Pool,
    indices: &[usize],
    subset_seed: u64,
    tokenizer: &Tokenizer,
    tasks: &[Task],
    dir: &Path,
) -> Result<(RunRecord, usize)> {
    crate::error::create_dir(dir)?;
    let cfg_path = dir.join(store::CONFIG_FILE);
    write(&cfg_path, toml::to_string(&spec.train).map_err(|e| LabError::format(&cfg_path, e.to_string()))?)?;
    let mut subset = match sample_subset(indices, spec.dataset_size, subset_seed) {
        Ok(s) => s,
        Err(e) => {
            let failure = FailureRecord { run_id: spec.run_id.clone(), error: e.to_string(), last_checkpoint: None, last_step: 0 };
            store::write_failure(dir, &failure)?;
            return Err(e.into());
        }
    };
    subset.sort_unstable();
    let mut writer = RunWriter::create(dir)?;
    let result = match pool {
        Pool::Synthetic(corpus) => train(&spec.train, &SyntheticSource::new(corpus, tokenizer, subset)?, &mut writer),
        Pool::Pairs(pairs) => train(&spec.train, &SubsetSource { pairs, indices: subset, tokenizer }, &mut writer),
    };
    writer.finish()?;
    let mut run = match result {
        Ok(run) => run,
        Err(e) => {
            let failure = FailureRecord {
                run_id: spec.run_id.clone(),
                error: e.to_string(),
                last_checkpoint: writer.latest_checkpoint(),
                last_step: writer.last_step,
            };
            store::write_failure(dir, &failure)?;
            return Err(e.into());
        }
    };
    let checkpoint = writer.latest_checkpoint().unwrap_or_default();
    run.record.checkpoint_path = Some(checkpoint.clone());
    run.record.quality_tier = cfg.dataset.keep_fraction;
    run.record.verify_compute_identity()?;
    let mut results = Vec::new();
    for (spec_eval, task) in cfg.eval.iter().zip(tasks) {
        for (metric, value) in run_task(&run.model, tokenizer, spec_eval, task, cfg.seed)? {
            run.record.eval.insert(format!("{}/{}", spec_eval.name, metric), value);
            results.push(EvalResult { checkpoint: checkpoint.clone(), task: spec_eval.name.clone(), metric, value });
        }
    }
    store::append_eval(&dir.join(store::EVAL_FILE), &results)?;
    store::write_record(dir, &run.record)?;
    let steps = run.record.steps;
    Ok((run.record, steps))
}
