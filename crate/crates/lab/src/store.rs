//! Per-run files.
//!
//! ```text
//! <run>/config.toml      training configuration
//! <run>/metrics.jsonl    one line per optimizer step (deterministic)
//! <run>/timing.jsonl     step and wall_time, kept apart so metrics stay byte-stable
//! <run>/eval.jsonl       one line per (checkpoint, task, metric)
//! <run>/record.toml      the run record, written last; its presence marks completion
//! <run>/failure.toml     written instead of the record when training aborts
//! <run>/checkpoints/step-NNNNNNNN/
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clip_lab_core::error::Result as CoreResult;
use clip_lab_core::model::DualEncoder;
use clip_lab_core::train::{CheckpointPoint, RunRecord, StepMetrics, TrainObserver};
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointManager;
use crate::error::{read_to_string, write, LabError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const RECORD_FILE: &str = "record.toml";
pub const FAILURE_FILE: &str = "failure.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub checkpoint: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub run_id: String,
    pub error: String,
    pub last_checkpoint: Option<String>,
    pub last_step: usize,
}

#[derive(Serialize)]
struct Timing {
    step: usize,
    wall_time: f64,
}

fn core_io(e: std::io::Error) -> clip_lab_core::error::Error {
    clip_lab_core::error::Error::Format(e.to_string())
}

/// Streams metrics and timing lines and writes checkpoints as training progresses.
pub struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    start: Instant,
    pub checkpoints: CheckpointManager,
    pub last_step: usize,
}

impl RunWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        crate::error::create_dir(dir)?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| LabError::io(&p, e))
        };
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            metrics: open(METRICS_FILE)?,
            timing: open(TIMING_FILE)?,
            start: Instant::now(),
            checkpoints: CheckpointManager::new(dir.join(CHECKPOINT_DIR)),
            last_step: 0,
        })
    }

    pub fn finish(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| LabError::io(self.dir.join(METRICS_FILE), e))?;
        self.timing.flush().map_err(|e| LabError::io(self.dir.join(TIMING_FILE), e))
    }

    /// Latest checkpoint relative to the run directory.
    pub fn latest_checkpoint(&self) -> Option<String> {
        self.checkpoints.latest().and_then(|p| p.strip_prefix(&self.dir).ok()).map(|p| p.display().to_string())
    }
}

impl TrainObserver for RunWriter {
    fn on_step(&mut self, m: &StepMetrics) -> CoreResult<()> {
        let line = serde_json::to_string(m).map_err(|e| clip_lab_core::error::Error::Format(e.to_string()))?;
        writeln!(self.metrics, "{line}").map_err(core_io)?;
        let t = Timing { step: m.step, wall_time: self.start.elapsed().as_secs_f64() };
        writeln!(self.timing, "{}", serde_json::to_string(&t).unwrap()).map_err(core_io)?;
        self.last_step = m.step;
        Ok(())
    }

    fn on_checkpoint(&mut self, model: &DualEncoder<f32>, point: CheckpointPoint) -> CoreResult<()> {
        self.checkpoints.save(model, point.step).map_err(|e| clip_lab_core::error::Error::Format(e.to_string()))?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LabError::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn append_eval(path: &Path, results: &[EvalResult]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| LabError::io(path, e))?;
    for r in results {
        writeln!(f, "{}", serde_json::to_string(r).unwrap()).map_err(|e| LabError::io(path, e))?;
    }
    Ok(())
}

/// Writes the record without its step series, which lives in `metrics.jsonl`.
pub fn write_record(dir: &Path, record: &RunRecord) -> Result<()> {
    let mut r = record.clone();
    r.metric_series.clear();
    let path = dir.join(RECORD_FILE);
    write(&path, toml::to_string(&r).map_err(|e| LabError::format(&path, e.to_string()))?)
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(RECORD_FILE).is_file()
}

/// Reads `record.toml` and reattaches the metric series.
pub fn read_record(dir: &Path) -> Result<RunRecord> {
    let path = dir.join(RECORD_FILE);
    let text = read_to_string(&path)?;
    let mut r: RunRecord = toml::from_str(&text).map_err(|e| crate::config::toml_error(&path, &text, &e))?;
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        r.metric_series = read_metrics(&metrics)?;
    }
    Ok(r)
}

pub fn write_failure(dir: &Path, failure: &FailureRecord) -> Result<()> {
    let path = dir.join(FAILURE_FILE);
    write(&path, toml::to_string(failure).map_err(|e| LabError::format(&path, e.to_string()))?)
}

/// Completed runs below `root/runs`, ordered by directory name.
pub fn read_all_records(root: &Path) -> Result<Vec<RunRecord>> {
    let runs = if root.join("runs").is_dir() { root.join("runs") } else { root.to_path_buf() };
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)
        .map_err(|e| LabError::io(&runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_complete(p))
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_record(d)).collect()
}
