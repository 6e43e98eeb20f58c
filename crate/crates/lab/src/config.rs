//! Experiment configuration files.
//!
//! TOML with `include = ["base.toml", ...]` (paths relative to the including
//! file). Included files are merged first, in order, and the including file
//! overrides them key by key. Every error names the file and line it came from.
//!
//! ```toml
//! name = "desk"
//! output_dir = "runs"
//! seed = 0
//! mode = "epochs"            # or "fixed-samples" with `sampled_data = N`
//! batch_size = 256
//! projection_dim = 32
//! text_encoder = "text_pico"
//!
//! [dataset]
//! synthetic = { n_pairs = 10000, n_classes = 8, caption_noise = 0.0, seed = 1 }
//!
//! [axes]
//! strategies = [{ kind = "clip" }, { kind = "flip", mask_ratio = 0.5 }]
//! vision = ["vit_pico"]
//! dataset_sizes = [10000]
//! epochs = [20]
//!
//! [[eval]]
//! name = "shapes"
//! kind = "zero_shot"
//! synthetic = { n_pairs = 800, n_classes = 8, caption_noise = 0.0, seed = 99 }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clip_lab_core::data::synthetic::SyntheticConfig;
use clip_lab_core::data::tokenizer::DESK_VOCAB;
use clip_lab_core::model::EncoderSpec;
use clip_lab_core::objectives::{StrategyConfig, StrategyKind};
use clip_lab_core::train::trainer::{DEFAULT_BATCH_SIZE, DEFAULT_CHECKPOINT_EVERY};
use clip_lab_core::train::OptimizerConfig;
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::error::{read_to_string, LabError, Result};

/// Turns a TOML deserialization error into a `file:line` configuration error.
pub fn toml_error(path: &Path, text: &str, err: &toml::de::Error) -> LabError {
    let line = err.span().map(|s| line_of(text, s.start)).unwrap_or(1);
    LabError::ConfigAt { file: path.to_path_buf(), line, message: err.message().trim().to_string() }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Every dataset size trains for each listed epoch count.
    #[default]
    Epochs,
    /// Every dataset size sees the same number of sampled examples.
    FixedSamples,
}

impl SweepMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "epochs" => Ok(SweepMode::Epochs),
            "fixed-samples" => Ok(SweepMode::FixedSamples),
            other => Err(LabError::Config(format!("unknown sweep mode `{other}` (expected epochs or fixed-samples)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Manifest file or directory; relative paths resolve against `CLIP_LAB_DATA_DIR`, then the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Keep only the top-scoring fraction before subset sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_fraction: Option<f64>,
    /// Seed of the nested subset permutation; defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSpec {
    /// Vocabulary file; when absent a tokenizer is trained on the dataset captions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
}

fn default_vocab() -> usize {
    DESK_VOCAB
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec { path: None, vocab_size: DESK_VOCAB }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    ZeroShot,
    LinearProbe,
    FewShot,
    Retrieval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub name: String,
    pub kind: EvalKind,
    /// Held-out synthetic images, labeled by their rendered class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Task file (see `tasks`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Share of synthetic images used as the probe training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
    /// Few-shot classifier: `linear_probe` (default) or `prototype`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<clip_lab_core::eval::FewShotMethod>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawAxes {
    // Items stay raw so a bad strategy reports its own line, not the array's.
    strategies: Option<Spanned<Vec<Spanned<toml::Value>>>>,
    vision: Option<Spanned<Vec<Spanned<String>>>>,
    dataset_sizes: Option<Spanned<Vec<Spanned<usize>>>>,
    epochs: Option<Spanned<Vec<Spanned<usize>>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    include: Vec<Spanned<String>>,
    name: Option<Spanned<String>>,
    output_dir: Option<Spanned<String>>,
    seed: Option<Spanned<u64>>,
    mode: Option<Spanned<SweepMode>>,
    sampled_data: Option<Spanned<u64>>,
    budget_gflops: Option<Spanned<f64>>,
    batch_size: Option<Spanned<usize>>,
    checkpoint_every: Option<Spanned<usize>>,
    projection_dim: Option<Spanned<usize>>,
    text_encoder: Option<Spanned<String>>,
    dataset: Option<Spanned<DatasetSpec>>,
    tokenizer: Option<Spanned<TokenizerSpec>>,
    optimizer: Option<Spanned<OptimizerConfig>>,
    #[serde(default)]
    axes: RawAxes,
    eval: Option<Spanned<Vec<Spanned<EvalSpec>>>>,
}

/// Sweep axes; the plan is their Cartesian product in this field order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Axes {
    pub strategies: Vec<StrategyConfig>,
    pub vision: Vec<String>,
    pub dataset_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub mode: SweepMode,
    pub sampled_data: Option<u64>,
    pub budget_gflops: Option<f64>,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub projection_dim: usize,
    pub text_encoder: String,
    pub dataset: DatasetSpec,
    pub tokenizer: TokenizerSpec,
    pub optimizer: OptimizerConfig,
    pub axes: Axes,
    pub eval: Vec<EvalSpec>,
    /// Directory of the top-level config file; relative paths resolve against it.
    pub base_dir: PathBuf,
    locations: BTreeMap<String, (PathBuf, usize)>,
}

/// Field-wise merge target; each value remembers where it was set.
#[derive(Default)]
struct Merged {
    values: BTreeMap<&'static str, (PathBuf, usize)>,
    name: Option<String>,
    output_dir: Option<(String, PathBuf)>,
    seed: Option<u64>,
    mode: Option<SweepMode>,
    sampled_data: Option<u64>,
    budget_gflops: Option<f64>,
    batch_size: Option<usize>,
    checkpoint_every: Option<usize>,
    projection_dim: Option<usize>,
    text_encoder: Option<String>,
    dataset: Option<(DatasetSpec, PathBuf)>,
    tokenizer: Option<(TokenizerSpec, PathBuf)>,
    optimizer: Option<OptimizerConfig>,
    strategies: Option<Vec<(StrategyConfig, usize)>>,
    vision: Option<Vec<(String, usize)>>,
    dataset_sizes: Option<Vec<(usize, usize)>>,
    epochs: Option<Vec<(usize, usize)>>,
    eval: Option<Vec<(EvalSpec, usize)>>,
    item_files: BTreeMap<&'static str, PathBuf>,
}

fn merge_file(path: &Path, merged: &mut Merged, stack: &mut Vec<PathBuf>) -> Result<()> {
    let canonical = std::fs::canonicalize(path).map_err(|e| LabError::io(path, e))?;
    if stack.contains(&canonical) {
        return Err(LabError::ConfigAt { file: path.to_path_buf(), line: 1, message: "include cycle".into() });
    }
    let text = read_to_string(path)?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| toml_error(path, &text, &e))?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    stack.push(canonical);
    for inc in &raw.include {
        let target = dir.join(inc.get_ref());
        if !target.exists() {
            return Err(LabError::ConfigAt {
                file: path.to_path_buf(),
                line: line_of(&text, inc.span().start),
                message: format!("included file {} does not exist", target.display()),
            });
        }
        merge_file(&target, merged, stack)?;
    }
    stack.pop();

    let at = |s: std::ops::Range<usize>| (path.to_path_buf(), line_of(&text, s.start));
    macro_rules! take {
        ($field:ident, $key:literal) => {
            if let Some(v) = raw.$field {
                merged.values.insert($key, at(v.span()));
                merged.$field = Some(v.into_inner());
            }
        };
    }
    take!(name, "name");
    take!(seed, "seed");
    take!(mode, "mode");
    take!(sampled_data, "sampled_data");
    take!(budget_gflops, "budget_gflops");
    take!(batch_size, "batch_size");
    take!(checkpoint_every, "checkpoint_every");
    take!(projection_dim, "projection_dim");
    take!(text_encoder, "text_encoder");
    take!(optimizer, "optimizer");
    if let Some(v) = raw.output_dir {
        merged.values.insert("output_dir", at(v.span()));
        merged.output_dir = Some((v.into_inner(), dir.clone()));
    }
    if let Some(v) = raw.dataset {
        merged.values.insert("dataset", at(v.span()));
        merged.dataset = Some((v.into_inner(), dir.clone()));
    }
    if let Some(v) = raw.tokenizer {
        merged.values.insert("tokenizer", at(v.span()));
        merged.tokenizer = Some((v.into_inner(), dir.clone()));
    }
    macro_rules! take_list {
        ($src:expr, $field:ident, $key:literal) => {
            if let Some(v) = $src {
                merged.values.insert($key, at(v.span()));
                merged.item_files.insert($key, path.to_path_buf());
                merged.$field = Some(v.into_inner().into_iter().map(|x| (x.span(), x)).map(|(s, x)| (x.into_inner(), line_of(&text, s.start))).collect());
            }
        };
    }
    let strategies = match raw.axes.strategies {
        Some(list) => {
            let span = list.span();
            let mut items = Vec::new();
            for item in list.into_inner() {
                let s = item.span();
                let v: StrategyConfig = item.into_inner().try_into().map_err(|e: toml::de::Error| LabError::ConfigAt {
                    file: path.to_path_buf(),
                    line: line_of(&text, s.start),
                    message: e.message().trim().to_string(),
                })?;
                items.push(Spanned::new(s, v));
            }
            Some(Spanned::new(span, items))
        }
        None => None,
    };
    take_list!(strategies, strategies, "axes.strategies");
    take_list!(raw.axes.vision, vision, "axes.vision");
    take_list!(raw.axes.dataset_sizes, dataset_sizes, "axes.dataset_sizes");
    take_list!(raw.axes.epochs, epochs, "axes.epochs");
    take_list!(raw.eval, eval, "eval");
    Ok(())
}

fn resolve_relative(dir: &Path, p: &str) -> String {
    let path = Path::new(p);
    if path.is_absolute() || std::env::var_os(crate::dataset::DATA_DIR_ENV).is_some() {
        p.to_string()
    } else {
        dir.join(path).display().to_string()
    }
}

impl ExperimentConfig {
    /// Reads, merges and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut merged = Merged::default();
        merge_file(path, &mut merged, &mut Vec::new())?;
        let top = path.to_path_buf();
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let missing = |key: &str| LabError::ConfigAt { file: top.clone(), line: 1, message: format!("missing required key `{key}`") };

        let mut locations = merged.values.clone().into_iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>();
        let mut list = |key: &'static str, lines: Vec<usize>| {
            if let Some(file) = merged.item_files.get(key) {
                for (i, line) in lines.into_iter().enumerate() {
                    locations.insert(format!("{key}[{i}]"), (file.clone(), line));
                }
            }
        };
        let strategies = merged.strategies.ok_or_else(|| missing("axes.strategies"))?;
        list("axes.strategies", strategies.iter().map(|x| x.1).collect());
        let vision = merged.vision.ok_or_else(|| missing("axes.vision"))?;
        list("axes.vision", vision.iter().map(|x| x.1).collect());
        let sizes = merged.dataset_sizes.ok_or_else(|| missing("axes.dataset_sizes"))?;
        list("axes.dataset_sizes", sizes.iter().map(|x| x.1).collect());
        let epochs = merged.epochs.unwrap_or_default();
        list("axes.epochs", epochs.iter().map(|x| x.1).collect());
        let eval = merged.eval.unwrap_or_default();
        list("eval", eval.iter().map(|x| x.1).collect());

        let (mut dataset, data_dir) = merged.dataset.ok_or_else(|| missing("dataset"))?;
        if let Some(m) = &dataset.manifest {
            dataset.manifest = Some(resolve_relative(&data_dir, m));
        }
        let tokenizer = match merged.tokenizer {
            Some((mut t, dir)) => {
                t.path = t.path.map(|p| resolve_relative(&dir, &p));
                t
            }
            None => TokenizerSpec::default(),
        };
        let mut eval: Vec<EvalSpec> = eval.into_iter().map(|x| x.0).collect();
        if let Some(file) = merged.item_files.get("eval") {
            let dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
            for e in &mut eval {
                e.file = e.file.take().map(|f| resolve_relative(&dir, &f));
            }
        }
        let output_dir = match merged.output_dir {
            Some((o, dir)) if Path::new(&o).is_relative() => dir.join(o),
            Some((o, _)) => PathBuf::from(o),
            None => base_dir.join("runs"),
        };
        let cfg = ExperimentConfig {
            name: merged.name.unwrap_or_else(|| "experiment".into()),
            output_dir,
            seed: merged.seed.unwrap_or(0),
            mode: merged.mode.unwrap_or_default(),
            sampled_data: merged.sampled_data,
            budget_gflops: merged.budget_gflops,
            batch_size: merged.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            checkpoint_every: merged.checkpoint_every.unwrap_or(DEFAULT_CHECKPOINT_EVERY),
            projection_dim: merged.projection_dim.unwrap_or(32),
            text_encoder: merged.text_encoder.unwrap_or_else(|| "text_pico".into()),
            dataset,
            tokenizer,
            optimizer: merged.optimizer.unwrap_or_default(),
            axes: Axes {
                strategies: strategies.into_iter().map(|x| x.0).collect(),
                vision: vision.into_iter().map(|x| x.0).collect(),
                dataset_sizes: sizes.into_iter().map(|x| x.0).collect(),
                epochs: epochs.into_iter().map(|x| x.0).collect(),
            },
            eval,
            base_dir,
            locations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Where `key` (e.g. `axes.vision[1]`) was set, falling back to its parent key, then line 1 of the top file.
    pub fn location(&self, key: &str) -> (PathBuf, usize) {
        let mut k = key;
        loop {
            if let Some(loc) = self.locations.get(k) {
                return loc.clone();
            }
            match k.rfind(['[', '.']) {
                Some(i) => k = &k[..i],
                None => return (self.base_dir.join("<config>"), 1),
            }
        }
    }

    pub fn error_at(&self, key: &str, message: impl Into<String>) -> LabError {
        let (file, line) = self.location(key);
        LabError::ConfigAt { file, line, message: message.into() }
    }

    pub fn validate(&self) -> Result<()> {
        let axes = &self.axes;
        for (key, empty) in [
            ("axes.strategies", axes.strategies.is_empty()),
            ("axes.vision", axes.vision.is_empty()),
            ("axes.dataset_sizes", axes.dataset_sizes.is_empty()),
        ] {
            if empty {
                return Err(self.error_at(key, format!("`{key}` must not be empty")));
            }
        }
        let text = EncoderSpec::preset(&self.text_encoder).map_err(|e| self.error_at("text_encoder", e.to_string()))?;
        text.validate_text().map_err(|e| self.error_at("text_encoder", e.to_string()))?;
        let mut specs = Vec::new();
        for (i, v) in axes.vision.iter().enumerate() {
            let spec = EncoderSpec::preset(v).map_err(|e| self.error_at(&format!("axes.vision[{i}]"), e.to_string()))?;
            spec.validate_vision().map_err(|e| self.error_at(&format!("axes.vision[{i}]"), e.to_string()))?;
            specs.push(spec);
        }
        for (i, s) in axes.strategies.iter().enumerate() {
            let key = format!("axes.strategies[{i}]");
            s.validate().map_err(|e| self.error_at(&key, e.to_string()))?;
            if s.kind == StrategyKind::Flip {
                if let Some((v, _)) = axes.vision.iter().zip(&specs).find(|(_, sp)| !sp.family.supports_patch_masking()) {
                    return Err(self.error_at(&key, format!("flip masks patches, which vision encoder `{v}` does not have")));
                }
            }
        }
        for (i, &n) in axes.dataset_sizes.iter().enumerate() {
            if n < self.batch_size {
                return Err(self.error_at(&format!("axes.dataset_sizes[{i}]"), format!("dataset size {n} is smaller than the batch size {}", self.batch_size)));
            }
        }
        match self.mode {
            SweepMode::Epochs => {
                if axes.epochs.is_empty() {
                    return Err(self.error_at("axes.epochs", "`axes.epochs` must not be empty in epochs mode"));
                }
                if let Some(i) = axes.epochs.iter().position(|&e| e == 0) {
                    return Err(self.error_at(&format!("axes.epochs[{i}]"), "epoch counts must be positive"));
                }
            }
            SweepMode::FixedSamples => match self.sampled_data {
                None | Some(0) => return Err(self.error_at("mode", "fixed-samples mode needs a positive `sampled_data`")),
                _ => {}
            },
        }
        if self.batch_size < 2 {
            return Err(self.error_at("batch_size", "batch size must be at least 2"));
        }
        if self.checkpoint_every == 0 {
            return Err(self.error_at("checkpoint_every", "checkpoint_every must be positive"));
        }
        if self.projection_dim == 0 {
            return Err(self.error_at("projection_dim", "projection_dim must be positive"));
        }
        if let Some(b) = self.budget_gflops {
            if !(b > 0.0) {
                return Err(self.error_at("budget_gflops", "budget must be positive"));
            }
        }
        self.optimizer.validate().map_err(|e| self.error_at("optimizer", e.to_string()))?;
        let d = &self.dataset;
        match (&d.manifest, &d.synthetic) {
            (Some(_), Some(_)) | (None, None) => return Err(self.error_at("dataset", "set exactly one of `manifest` or `synthetic`")),
            (Some(m), None) => {
                let p = crate::dataset::resolve_data_path(Path::new(m));
                if !p.exists() {
                    return Err(self.error_at("dataset", format!("manifest {} does not exist", p.display())));
                }
            }
            (None, Some(s)) => {
                clip_lab_core::data::SyntheticCorpus::new(s.clone()).map_err(|e| self.error_at("dataset", e.to_string()))?;
                if let Some(i) = axes.dataset_sizes.iter().position(|&n| n > s.n_pairs) {
                    return Err(self.error_at(&format!("axes.dataset_sizes[{i}]"), format!("size exceeds the {} synthetic pairs", s.n_pairs)));
                }
            }
        }
        if let Some(f) = d.keep_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(self.error_at("dataset", format!("keep_fraction {f} is outside (0, 1]")));
            }
        }
        if let Some(p) = &self.tokenizer.path {
            if !crate::dataset::resolve_data_path(Path::new(p)).exists() {
                return Err(self.error_at("tokenizer", format!("tokenizer file {p} does not exist")));
            }
        } else if self.tokenizer.vocab_size < clip_lab_core::data::tokenizer::MIN_VOCAB {
            return Err(self.error_at("tokenizer", "vocab_size must be at least 8"));
        }
        for (i, e) in self.eval.iter().enumerate() {
            let key = format!("eval[{i}]");
            if e.synthetic.is_some() == e.file.is_some() {
                return Err(self.error_at(&key, format!("eval task `{}` needs exactly one of `synthetic` or `file`", e.name)));
            }
            if let Some(s) = &e.synthetic {
                clip_lab_core::data::SyntheticCorpus::new(s.clone()).map_err(|err| self.error_at(&key, err.to_string()))?;
            }
            if let Some(f) = &e.file {
                if !crate::dataset::resolve_data_path(Path::new(f)).exists() {
                    return Err(self.error_at(&key, format!("task file {f} does not exist")));
                }
            }
            if e.k == Some(0) {
                return Err(self.error_at(&key, "k must be positive"));
            }
            if let Some(f) = e.train_fraction {
                if !(f > 0.0 && f < 1.0) {
                    return Err(self.error_at(&key, "train_fraction must lie in (0, 1)"));
                }
            }
            if self.eval[..i].iter().any(|o| o.name == e.name) {
                return Err(self.error_at(&key, format!("duplicate eval task name `{}`", e.name)));
            }
        }
        Ok(())
    }
}
