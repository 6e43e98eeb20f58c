//! Evaluation task construction and execution.
//!
//! Task files are TOML:
//!
//! ```toml
//! kind = "classification"          # or "retrieval"
//! manifest = "heldout"             # dataset whose pairs supply the images (and captions)
//! class_names = ["red circle", "green circle"]
//! templates = ["a photo of a {}"]
//! labels = [0, 1, 1]               # one per pair; classification only
//! train_manifest = "probe_train"   # optional, for probe tasks
//! train_labels = [0, 1]
//! caption_image = [0, 1, 2]        # retrieval; defaults to caption i describing image i
//! ```

use std::path::Path;

use clip_lab_core::data::image::RgbImage;
use clip_lab_core::data::synthetic::{SyntheticConfig, SyntheticCorpus, CAPTION_TEMPLATES};
use clip_lab_core::data::tokenizer::Tokenizer;
use clip_lab_core::eval::{
    build_zero_shot_classifier, few_shot_accuracy, linear_probe, retrieval_recall_at_1, zero_shot_accuracy, ClassificationTask, ProbeConfig,
    RetrievalTask, SplitTask,
};
use clip_lab_core::model::DualEncoder;
use serde::Deserialize;

use crate::config::{toml_error, EvalKind, EvalSpec};
use crate::dataset::{load_dataset, resolve_data_path};
use crate::error::{read_to_string, LabError, Result};

pub const DEFAULT_FEW_SHOT_K: usize = 5;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.5;

#[derive(Clone, Debug)]
pub enum Task {
    Classification(ClassificationTask),
    Split(SplitTask),
    Retrieval(RetrievalTask),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum FileKind {
    Classification,
    Retrieval,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    kind: FileKind,
    manifest: String,
    #[serde(default)]
    class_names: Vec<String>,
    #[serde(default)]
    templates: Vec<String>,
    #[serde(default)]
    labels: Vec<usize>,
    train_manifest: Option<String>,
    #[serde(default)]
    train_labels: Vec<usize>,
    caption_image: Option<Vec<usize>>,
}

fn synthetic_images(cfg: &SyntheticConfig) -> Result<(SyntheticCorpus, Vec<(RgbImage, usize, String)>)> {
    let corpus = SyntheticCorpus::new(cfg.clone())?;
    let items = (0..corpus.len())
        .map(|i| {
            let p = corpus.pair(i);
            (p.image, p.image_class, p.caption)
        })
        .collect();
    Ok((corpus, items))
}

fn labeled(path: &Path, dir: &Path, manifest: &str, labels: &[usize]) -> Result<Vec<(RgbImage, usize)>> {
    let data = load_dataset(&resolve_manifest(dir, manifest))?;
    if data.pairs.len() != labels.len() {
        return Err(LabError::format(path, format!("{} labels for {} pairs in {}", labels.len(), data.pairs.len(), manifest)));
    }
    Ok(data.pairs.into_iter().zip(labels).map(|(p, &l)| (p.image, l)).collect())
}

fn resolve_manifest(dir: &Path, p: &str) -> std::path::PathBuf {
    if Path::new(p).is_relative() && std::env::var_os(crate::dataset::DATA_DIR_ENV).is_none() {
        dir.join(p)
    } else {
        Path::new(p).to_path_buf()
    }
}

fn load_task_file(path: &Path, kind: EvalKind) -> Result<Task> {
    let path = resolve_data_path(path);
    let text = read_to_string(&path)?;
    let file: TaskFile = toml::from_str(&text).map_err(|e| toml_error(&path, &text, &e))?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    match (file.kind, kind) {
        (FileKind::Retrieval, EvalKind::Retrieval) => {
            let data = load_dataset(&resolve_manifest(&dir, &file.manifest))?;
            let n = data.pairs.len();
            let gt = file.caption_image.unwrap_or_else(|| (0..n).collect());
            let task = RetrievalTask {
                captions: data.pairs.iter().map(|p| p.caption.clone()).collect(),
                images: data.pairs.into_iter().map(|p| p.image).collect(),
                caption_image: gt.into_iter().map(Some).collect(),
            };
            task.validate()?;
            Ok(Task::Retrieval(task))
        }
        (FileKind::Classification, EvalKind::ZeroShot) => {
            let task = ClassificationTask {
                class_names: file.class_names,
                prompt_templates: file.templates,
                examples: labeled(&path, &dir, &file.manifest, &file.labels)?,
            };
            task.validate()?;
            Ok(Task::Classification(task))
        }
        (FileKind::Classification, EvalKind::LinearProbe | EvalKind::FewShot) => {
            let Some(train) = &file.train_manifest else {
                return Err(LabError::format(&path, "probe tasks need `train_manifest` and `train_labels`"));
            };
            let task = SplitTask {
                class_names: file.class_names,
                train: labeled(&path, &dir, train, &file.train_labels)?,
                test: labeled(&path, &dir, &file.manifest, &file.labels)?,
            };
            task.validate()?;
            Ok(Task::Split(task))
        }
        _ => Err(LabError::format(&path, "task file kind does not fit the evaluation kind")),
    }
}

/// Materializes the images and labels an evaluation needs.
pub fn build_task(spec: &EvalSpec) -> Result<Task> {
    if let Some(f) = &spec.file {
        return load_task_file(Path::new(f), spec.kind);
    }
    let cfg = spec.synthetic.as_ref().ok_or_else(|| LabError::Config(format!("eval task `{}` has no source", spec.name)))?;
    let (corpus, items) = synthetic_images(cfg)?;
    let class_names = corpus.class_names();
    Ok(match spec.kind {
        EvalKind::ZeroShot => Task::Classification(ClassificationTask {
            class_names,
            prompt_templates: CAPTION_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            examples: items.into_iter().map(|(img, c, _)| (img, c)).collect(),
        }),
        EvalKind::LinearProbe | EvalKind::FewShot => {
            let n_train = (spec.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION) * items.len() as f64).floor() as usize;
            let mut all: Vec<(RgbImage, usize)> = items.into_iter().map(|(img, c, _)| (img, c)).collect();
            let test = all.split_off(n_train);
            Task::Split(SplitTask { class_names, train: all, test })
        }
        EvalKind::Retrieval => {
            let n = items.len();
            let (images, captions): (Vec<_>, Vec<_>) = items.into_iter().map(|(img, _, cap)| (img, cap)).unzip();
            Task::Retrieval(RetrievalTask { images, captions, caption_image: (0..n).map(Some).collect() })
        }
    })
}

/// Runs one evaluation and returns `(metric, value)` pairs.
pub fn run_task(model: &DualEncoder<f32>, tokenizer: &Tokenizer, spec: &EvalSpec, task: &Task, seed: u64) -> Result<Vec<(String, f64)>> {
    Ok(match (spec.kind, task) {
        (EvalKind::ZeroShot, Task::Classification(t)) => {
            let clf = build_zero_shot_classifier(model, t, tokenizer)?;
            vec![("accuracy".into(), zero_shot_accuracy(model, &clf, t)?)]
        }
        (EvalKind::LinearProbe, Task::Split(t)) => {
            let mut cfg = ProbeConfig { seed, ..ProbeConfig::default() };
            if let Some(g) = &spec.lr_grid {
                cfg.lr_grid = g.clone();
            }
            if let Some(e) = spec.epochs {
                cfg.epochs = e;
            }
            let r = linear_probe(model, t, &cfg)?;
            let failed = r.grid.iter().filter(|g| g.val_accuracy.is_none() && r.grid.len() > 1).count();
            vec![("accuracy".into(), r.accuracy), ("lr".into(), r.lr), ("failed_grid_points".into(), failed as f64)]
        }
        (EvalKind::FewShot, Task::Split(t)) => {
            let k = spec.k.unwrap_or(DEFAULT_FEW_SHOT_K);
            let acc = few_shot_accuracy(model, t, k, seed, spec.method.unwrap_or_default())?;
            vec![(format!("accuracy_k{k}"), acc)]
        }
        (EvalKind::Retrieval, Task::Retrieval(t)) => {
            let r = retrieval_recall_at_1(model, t, tokenizer)?;
            vec![("text_r1".into(), r.text_retrieval), ("image_r1".into(), r.image_retrieval)]
        }
        _ => return Err(LabError::Config(format!("eval task `{}` was built for a different kind", spec.name))),
    })
}
