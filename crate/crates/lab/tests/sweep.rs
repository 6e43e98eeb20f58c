use std::path::{Path, PathBuf};
use std::process::Command;

use clip_lab::config::ExperimentConfig;
use clip_lab::error::LabError;
use clip_lab::report::{curve_series, read_curve_csv, report, ReportKind};
use clip_lab::store::{read_all_records, FAILURE_FILE, METRICS_FILE, RECORD_FILE, TIMING_FILE};
use clip_lab::sweep::{execute, plan_sweep, run_dir, ExecuteOptions};

const BIN: &str = env!("CARGO_BIN_EXE_clip-lab");

fn config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("sweep.toml");
    std::fs::write(&p, body).unwrap();
    p
}

/// Four runs of a few steps each, with a small zero-shot task.
fn small_sweep(dir: &Path) -> ExperimentConfig {
    let p = config(
        dir,
        "name = \"small\"\nbatch_size = 16\ncheckpoint_every = 2\n\
         [dataset]\nsynthetic = { n_pairs = 64, n_classes = 8, caption_noise = 0.1, seed = 3 }\n\
         [tokenizer]\nvocab_size = 96\n\
         [axes]\nstrategies = [{ kind = \"clip\" }, { kind = \"flip\", mask_ratio = 0.5 }]\nvision = [\"vit_pico\"]\ndataset_sizes = [32, 64]\nepochs = [1]\n\
         [[eval]]\nname = \"shapes\"\nkind = \"zero_shot\"\nsynthetic = { n_pairs = 24, n_classes = 8, caption_noise = 0.0, seed = 4 }\n",
    );
    ExperimentConfig::load(&p).unwrap()
}

fn planning_config(dir: &Path, extra: &str, sizes: &str) -> ExperimentConfig {
    let body = format!(
        "{extra}\nbatch_size = 64\n[dataset]\nsynthetic = {{ n_pairs = 10000, n_classes = 8, caption_noise = 0.0, seed = 1 }}\n\
         [tokenizer]\nvocab_size = 128\n[axes]\nstrategies = [{{ kind = \"clip\" }}, {{ kind = \"slip\" }}]\nvision = [\"vit_pico\"]\n\
         dataset_sizes = {sizes}\nepochs = [1]\n"
    );
    ExperimentConfig::load(&config(dir, &body)).unwrap()
}

#[test]
fn plan_is_the_full_product() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = planning_config(dir.path(), "", "[1000, 2000, 4000]");
    let plan = plan_sweep(&cfg).unwrap();
    assert_eq!(plan.runs.len(), 6);
    let mut ids: Vec<&str> = plan.runs.iter().map(|r| r.run_id.as_str()).collect();
    assert!(ids.iter().all(|id| id.len() == 16 && id.chars().all(|c| c.is_ascii_hexdigit())));
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 6);
    assert_eq!(plan_sweep(&cfg).unwrap(), plan);
    for r in &plan.runs {
        assert!((r.planned_gflops - r.gflops_per_sample * r.planned_sampled_data as f64).abs() <= 1e-9 * r.planned_gflops);
    }
}

#[test]
fn fixed_samples_trades_epochs_for_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = planning_config(dir.path(), "mode = \"fixed-samples\"\nsampled_data = 10000", "[1000, 10000]");
    let plan = plan_sweep(&cfg).unwrap();
    for r in plan.runs.iter().filter(|r| r.train.strategy.label() == "clip") {
        let want = 10_000.0 / r.dataset_size as f64;
        assert_eq!(r.nominal_epochs, want);
        let eb = r.train.effective_batch() as i64;
        assert!((r.planned_sampled_data as i64 - 10_000).abs() <= eb, "{}", r.planned_sampled_data);
        // Enough epochs are scheduled to cover the step cap.
        let steps = r.train.max_steps.unwrap();
        assert!(r.train.epochs * (r.dataset_size / 64) >= steps);
    }
    let nominal: Vec<f64> = plan.runs.iter().map(|r| r.nominal_epochs).collect();
    assert_eq!(nominal, vec![10.0, 1.0, 10.0, 1.0]);
}

#[test]
fn budget_drops_expensive_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = planning_config(dir.path(), "", "[1000]");
    let plan = plan_sweep(&cfg).unwrap();
    let (clip, slip) = (plan.runs[0].planned_gflops, plan.runs[1].planned_gflops);
    assert!(slip > clip);
    let mut tight = cfg.clone();
    tight.budget_gflops = Some((clip + slip) / 2.0);
    let plan = plan_sweep(&tight).unwrap();
    assert_eq!((plan.runs.len(), plan.excluded.len()), (1, 1));
    assert_eq!(plan.runs[0].train.strategy.label(), "clip");
    tight.budget_gflops = Some(clip / 2.0);
    let err = plan_sweep(&tight).unwrap_err();
    assert!(matches!(err, LabError::Plan(_)));
    assert_eq!(err.exit_code(), 2);
}

fn metrics_bytes(cfg: &ExperimentConfig, id: &str) -> Vec<u8> {
    std::fs::read(run_dir(cfg, id).join(METRICS_FILE)).unwrap()
}

#[test]
fn resume_retrains_only_missing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sweep(dir.path());
    let plan = plan_sweep(&cfg).unwrap();
    let first = execute(&cfg, &plan, ExecuteOptions::default()).unwrap();
    assert_eq!(first.records.len(), 4);
    assert!(first.failures.is_empty());
    assert_eq!(first.trained_steps, first.records.iter().map(|r| r.steps).sum::<usize>());
    let id = &plan.runs[0].run_id;
    let d = run_dir(&cfg, id);
    assert!(d.join(TIMING_FILE).exists() && d.join("eval.jsonl").exists());
    assert!(first.records[0].eval.contains_key("shapes/accuracy"));

    let again = execute(&cfg, &plan, ExecuteOptions { resume: true, workers: 1 }).unwrap();
    assert_eq!((again.trained_steps, again.skipped.len()), (0, 4));
    assert_eq!(again.records, first.records);

    let before: Vec<Vec<u8>> = plan.runs.iter().map(|r| metrics_bytes(&cfg, &r.run_id)).collect();
    for r in &plan.runs[2..] {
        std::fs::remove_file(run_dir(&cfg, &r.run_id).join(RECORD_FILE)).unwrap();
    }
    let partial = execute(&cfg, &plan, ExecuteOptions { resume: true, workers: 1 }).unwrap();
    assert_eq!(partial.skipped, vec![plan.runs[0].run_id.clone(), plan.runs[1].run_id.clone()]);
    assert_eq!(partial.trained_steps, first.records[2].steps + first.records[3].steps);
    let after: Vec<Vec<u8>> = plan.runs.iter().map(|r| metrics_bytes(&cfg, &r.run_id)).collect();
    assert_eq!(before, after);
}

#[test]
fn parallel_workers_match_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let mut seq = small_sweep(dir.path());
    let mut par = seq.clone();
    seq.output_dir = dir.path().join("seq");
    par.output_dir = dir.path().join("par");
    let plan = plan_sweep(&seq).unwrap();
    let a = execute(&seq, &plan, ExecuteOptions::default()).unwrap();
    let b = execute(&par, &plan, ExecuteOptions { resume: false, workers: 3 }).unwrap();
    assert_eq!(a.records, b.records);
    for r in &plan.runs {
        assert_eq!(metrics_bytes(&seq, &r.run_id), metrics_bytes(&par, &r.run_id));
    }
}

#[test]
fn reports_read_back_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sweep(dir.path());
    let plan = plan_sweep(&cfg).unwrap();
    execute(&cfg, &plan, ExecuteOptions::default()).unwrap();
    let records = read_all_records(&cfg.output_dir).unwrap();
    assert_eq!(records.len(), 4);

    let out = dir.path().join("report");
    report(&records[..1], ReportKind::Table, None, &out).unwrap();
    let csv = std::fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.contains(&records[0].run_id) && std::fs::read_to_string(out.join("table.txt")).unwrap().contains(&records[0].run_id));

    let metric = "shapes/accuracy";
    let series = curve_series(&records, ReportKind::ComputeCurve, metric).unwrap();
    for s in &series {
        for &(x, y) in &s.points {
            let r = records.iter().find(|r| r.gflops_per_sample * r.sampled_data_count as f64 == x).expect("x is total compute");
            assert_eq!(y, 1.0 - r.eval[metric]);
        }
    }
    let files = report(&records, ReportKind::ComputeCurve, Some(metric), &out).unwrap();
    assert!(files[1].extension().unwrap() == "svg" && std::fs::read_to_string(&files[1]).unwrap().contains("<svg"));
    assert_eq!(read_curve_csv(&files[0]).unwrap(), series);

    let err = report(&records, ReportKind::QualityCurve, Some(metric), &out).unwrap_err();
    assert!(err.to_string().contains("keep_fraction"), "{err}");
}

fn clip_lab(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

#[test]
fn exit_codes_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.display().to_string();
    let gen = clip_lab(&["generate-data", "--output", &d, "--pairs", "40", "--seed", "1", "--shard-size", "16"]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let body = format!(
        "batch_size = 16\ncheckpoint_every = 100\n[dataset]\nmanifest = \"{d}\"\n[tokenizer]\nvocab_size = 96\n\
         [axes]\nstrategies = [{{ kind = \"clip\" }}]\nvision = [\"vit_pico\"]\ndataset_sizes = [32, 64]\nepochs = [1]\n"
    );
    let cfg = config(dir.path(), &body);
    let out = dir.path().join("out");
    let run = clip_lab(&["sweep", "--config", &cfg.display().to_string(), "--output", &out.display().to_string()]);
    assert_eq!(run.status.code(), Some(3), "{}", String::from_utf8_lossy(&run.stderr));
    let runs: Vec<PathBuf> = std::fs::read_dir(out.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs.iter().filter(|r| r.join(RECORD_FILE).exists()).count(), 1);
    let failed = runs.iter().find(|r| r.join(FAILURE_FILE).exists()).expect("failure is recorded");
    assert!(std::fs::read_to_string(failed.join(FAILURE_FILE)).unwrap().contains("run_id"));

    let done = runs.iter().find(|r| r.join(RECORD_FILE).exists()).unwrap();
    let inspect = clip_lab(&["inspect-run", "--run", &done.display().to_string()]);
    assert!(inspect.status.success());

    std::fs::write(&cfg, body.replace("batch_size", "batch")).unwrap();
    let bad = clip_lab(&["sweep", "--config", &cfg.display().to_string()]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("sweep.toml:1"), "{}", String::from_utf8_lossy(&bad.stderr));
}
