use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use clip_lab_core::data::synthetic::SyntheticConfig;
use clip_lab_core::data::tokenizer::{Tokenizer, DESK_VOCAB};
use clip_lab_core::data::{quality_filter, score_pairs, DatasetManifest, ImageTextPair};

use crate::checkpoint::load_checkpoint;
use crate::config::{EvalKind, EvalSpec, ExperimentConfig, SweepMode};
use crate::dataset::{generate_synthetic_corpus, load_dataset, load_tokenizer, save_tokenizer, write_dataset, write_skip_report, DatasetInfo, DEFAULT_SHARD_SIZE};
use crate::error::{LabError, Result};
use crate::report::{report, ReportKind};
use crate::store::{self, EvalResult};
use crate::sweep::{execute, plan_sweep, ExecuteOptions};
use crate::tasks::{build_task, run_task};

#[derive(Parser, Debug)]
#[command(name = "clip-lab", version, about = "Desk-scale contrastive image-text pretraining experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic shape/color corpus into shards.
    GenerateData(GenerateArgs),
    /// Train a subword vocabulary on a dataset's captions.
    TrainTokenizer(TokenizerArgs),
    /// Attach scorer cosine similarities to every pair.
    Score(ScoreArgs),
    /// Keep the top-scoring fraction of a scored dataset.
    Filter(FilterArgs),
    /// Plan and run an experiment sweep.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Tables and curves over completed runs.
    Report(ReportArgs),
    /// Summarize one run directory.
    InspectRun(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    #[arg(long, default_value_t = 10_000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_SHARD_SIZE)]
    pub shard_size: usize,
}

#[derive(Args, Debug)]
pub struct TokenizerArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = DESK_VOCAB)]
    pub vocab_size: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SHARD_SIZE)]
    pub shard_size: usize,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub keep: f64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SHARD_SIZE)]
    pub shard_size: usize,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Skip runs that already completed.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub budget_gflops: Option<f64>,
    #[arg(long, value_parser = ["epochs", "fixed-samples"])]
    pub mode: Option<String>,
    /// Print the plan without training.
    #[arg(long)]
    pub plan_only: bool,
    /// Train this many runs at once.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Experiment config whose `[[eval]]` tasks to run.
    #[arg(long, conflicts_with = "task")]
    pub config: Option<PathBuf>,
    /// A single task file.
    #[arg(long, requires = "kind")]
    pub task: Option<PathBuf>,
    #[arg(long, value_parser = ["zero_shot", "linear_probe", "few_shot", "retrieval"])]
    pub kind: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Sweep output directory or its `runs/` directory.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub kind: ReportKind,
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub run: PathBuf,
}

/// Loads a config and applies command-line overrides.
pub fn load_config(args: &SweepArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(b) = args.budget_gflops {
        cfg.budget_gflops = Some(b);
    }
    if let Some(m) = &args.mode {
        cfg.mode = SweepMode::parse(m)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn rewrite(src: &Path, output: &Path, shard_size: usize, edit: impl FnOnce(Vec<ImageTextPair>, &DatasetManifest) -> Result<(Vec<ImageTextPair>, Option<f64>)>) -> Result<DatasetManifest> {
    let data = load_dataset(src)?;
    if !data.skipped.is_empty() {
        write_skip_report(&output.join("skips.jsonl"), &data.skipped)?;
    }
    let (pairs, tier) = edit(data.pairs, &data.manifest)?;
    let info = DatasetInfo {
        name: data.manifest.name.clone(),
        provenance: data.manifest.provenance,
        quality_tier: tier,
        synthetic: data.manifest.synthetic.clone(),
    };
    write_dataset(output, info, pairs, shard_size)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => {
            let cfg = SyntheticConfig::new(a.pairs, a.classes, a.noise, a.seed);
            let m = generate_synthetic_corpus(&a.output, &a.name, cfg, a.shard_size)?;
            println!("wrote {} pairs in {} shards to {}", m.pair_count, m.shards.len(), a.output.display());
        }
        Command::TrainTokenizer(a) => {
            let data = load_dataset(&a.manifest)?;
            let t = Tokenizer::train(data.pairs.iter().map(|p| p.caption.as_str()), a.vocab_size)?;
            save_tokenizer(&a.output, &t)?;
            println!("vocabulary of {} pieces written to {}", t.vocab_size(), a.output.display());
        }
        Command::Score(a) => {
            let scorer = load_checkpoint(&a.checkpoint, None)?;
            let tok = load_tokenizer(&a.tokenizer)?;
            let m = rewrite(&a.manifest, &a.output, a.shard_size, |mut pairs, m| {
                let refs: Vec<_> = pairs.iter().map(|p| (&p.image, p.caption.as_str())).collect();
                let scores = score_pairs(&scorer, &tok, &refs)?;
                pairs.iter_mut().zip(scores).for_each(|(p, s)| p.quality_score = Some(s));
                Ok((pairs, m.quality_tier))
            })?;
            println!("scored {} pairs into {}", m.pair_count, a.output.display());
        }
        Command::Filter(a) => {
            let m = rewrite(&a.manifest, &a.output, a.shard_size, |pairs, m| {
                let metas: Vec<_> = pairs.iter().map(|p| p.meta()).collect();
                let kept: std::collections::BTreeSet<u64> = quality_filter(&metas, a.keep)?.into_iter().map(|p| p.pair_id).collect();
                let tier = m.quality_tier.unwrap_or(1.0) * a.keep;
                Ok((pairs.into_iter().filter(|p| kept.contains(&p.pair_id)).collect(), Some(tier)))
            })?;
            println!("kept {} pairs in {}", m.pair_count, a.output.display());
        }
        Command::Sweep(a) => {
            let cfg = load_config(&a)?;
            let plan = plan_sweep(&cfg)?;
            for (i, r) in plan.runs.iter().enumerate() {
                println!(
                    "run {:>3} {} {} {} n={} epochs={} sampled={} gflops={:.4e}",
                    i + 1,
                    r.run_id,
                    r.train.strategy.label(),
                    r.vision,
                    r.dataset_size,
                    r.nominal_epochs,
                    r.planned_sampled_data,
                    r.planned_gflops
                );
            }
            for (r, why) in &plan.excluded {
                println!("excluded {} {} {}: {}", r.run_id, r.train.strategy.label(), r.vision, why);
            }
            if a.plan_only {
                return Ok(());
            }
            let out = execute(&cfg, &plan, ExecuteOptions { resume: a.resume, workers: a.workers })?;
            println!("{} trained, {} skipped, {} failed ({} steps)", out.records.len() - out.skipped.len(), out.skipped.len(), out.failures.len(), out.trained_steps);
            for (id, err) in &out.failures {
                eprintln!("run {id} failed: {err}");
            }
            if !out.failures.is_empty() {
                return Err(LabError::PartialFailure { failed: out.failures.len(), total: plan.runs.len() });
            }
        }
        Command::Eval(a) => {
            let model = load_checkpoint(&a.checkpoint, None)?;
            let tok = load_tokenizer(&a.tokenizer)?;
            let specs = match (&a.config, &a.task) {
                (Some(c), _) => ExperimentConfig::load(c)?.eval,
                (None, Some(t)) => {
                    let kind: EvalKind = serde_json::from_value(serde_json::Value::String(a.kind.clone().unwrap_or_default()))
                        .map_err(|e| LabError::Config(e.to_string()))?;
                    let name = t.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "task".into());
                    vec![EvalSpec { name, kind, synthetic: None, file: Some(t.display().to_string()), k: None, lr_grid: None, epochs: None, train_fraction: None, method: None }]
                }
                _ => return Err(LabError::Config("pass --config or --task".into())),
            };
            let mut results = Vec::new();
            for spec in &specs {
                let task = build_task(spec)?;
                for (metric, value) in run_task(&model, &tok, spec, &task, a.seed)? {
                    println!("{}/{} = {:.6}", spec.name, metric, value);
                    results.push(EvalResult { checkpoint: a.checkpoint.display().to_string(), task: spec.name.clone(), metric, value });
                }
            }
            let run_dir = a.checkpoint.parent().and_then(|p| p.parent()).filter(|d| d.join(store::METRICS_FILE).is_file());
            if let Some(dir) = run_dir {
                store::append_eval(&dir.join(store::EVAL_FILE), &results)?;
            }
        }
        Command::Report(a) => {
            let records = store::read_all_records(&a.runs)?;
            for p in report(&records, a.kind, a.metric.as_deref(), &a.output)? {
                println!("{}", p.display());
            }
        }
        Command::InspectRun(a) => {
            if !store::is_complete(&a.run) {
                let f = a.run.join(store::FAILURE_FILE);
                if f.is_file() {
                    print!("{}", crate::error::read_to_string(&f)?);
                    return Ok(());
                }
                return Err(LabError::Config(format!("{} holds no completed run", a.run.display())));
            }
            let r = store::read_record(&a.run)?;
            println!("run_id             {}", r.run_id);
            println!("strategy           {}", r.strategy.label());
            println!("vision             {}", crate::report::vision_label(&r.model.vision));
            println!("parameters         {}", r.model.parameter_count());
            println!("dataset            {} ({} pairs)", r.dataset_name, r.dataset_size);
            println!("epochs / steps     {} / {}", r.epochs, r.steps);
            println!("sampled data       {}", r.sampled_data_count);
            println!("GFLOPs per sample  {:.6}", r.gflops_per_sample);
            println!("total GFLOPs       {:.3}", r.total_gflops);
            println!("final loss         {:.6}", r.final_loss);
            println!("checkpoint         {}", r.checkpoint_path.as_deref().unwrap_or("-"));
            for (k, v) in &r.eval {
                println!("{k:<18} {v:.6}");
            }
        }
    }
    Ok(())
}
