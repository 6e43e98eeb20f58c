//! Dataset manifests, shard sets, tokenizer files and skip reports on disk.

use std::path::{Path, PathBuf};

use clip_lab_core::data::synthetic::{SyntheticConfig, SyntheticCorpus};
use clip_lab_core::data::tokenizer::Tokenizer;
use clip_lab_core::data::{check_unique_ids, DatasetManifest, ImageTextPair, Provenance, ShardEntry};

use crate::error::{read_to_string, write, LabError, Result};
use crate::shard::{read_shard, write_shard, SkipRecord};

/// Roots every relative manifest path when set.
pub const DATA_DIR_ENV: &str = "CLIP_LAB_DATA_DIR";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DEFAULT_SHARD_SIZE: usize = 1000;

pub fn resolve_data_path(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Accepts either a manifest file or a directory holding `manifest.toml`.
fn manifest_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = manifest_file(&resolve_data_path(path));
    let text = read_to_string(&path)?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| crate::config::toml_error(&path, &text, &e))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let text = toml::to_string(manifest).map_err(|e| LabError::format(path, e.to_string()))?;
    write(path, text)
}

/// Pairs of a dataset plus records that could not be decoded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<ImageTextPair>,
    pub skipped: Vec<SkipRecord>,
}

/// Loads every shard of a manifest. Shard paths are relative to the manifest's directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = manifest_file(&resolve_data_path(path));
    let manifest = read_manifest(&file)?;
    let dir = file.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::with_capacity(manifest.pair_count);
    let mut skipped = Vec::new();
    for entry in &manifest.shards {
        let contents = read_shard(&dir.join(&entry.path))?;
        if contents.pairs.len() + contents.skipped.len() != entry.records {
            return Err(LabError::format(&file, format!("shard {} holds {} records, manifest says {}", entry.path, contents.pairs.len() + contents.skipped.len(), entry.records)));
        }
        pairs.extend(contents.pairs);
        skipped.extend(contents.skipped);
    }
    check_unique_ids(pairs.iter().map(|p| p.pair_id))?;
    Ok(Dataset { manifest, pairs, skipped })
}

/// Metadata for a dataset about to be written.
#[derive(Clone, Debug)]
pub struct DatasetInfo {
    pub name: String,
    pub provenance: Provenance,
    pub quality_tier: Option<f64>,
    pub synthetic: Option<SyntheticConfig>,
}

/// Writes shards of at most `shard_size` records plus `manifest.toml` into `dir`.
pub fn write_dataset<I>(dir: &Path, info: DatasetInfo, pairs: I, shard_size: usize) -> Result<DatasetManifest>
where
    I: IntoIterator<Item = ImageTextPair>,
{
    if shard_size == 0 {
        return Err(LabError::Config("shard size must be positive".into()));
    }
    crate::error::create_dir(dir)?;
    let mut shards = Vec::new();
    let mut buf = Vec::with_capacity(shard_size);
    let flush = |buf: &mut Vec<ImageTextPair>, shards: &mut Vec<ShardEntry>| -> Result<()> {
        let name = format!("shard-{:05}.cbls", shards.len());
        let records = write_shard(&dir.join(&name), buf.iter())? as usize;
        shards.push(ShardEntry { path: name, records });
        buf.clear();
        Ok(())
    };
    for pair in pairs {
        pair.validate()?;
        buf.push(pair);
        if buf.len() == shard_size {
            flush(&mut buf, &mut shards)?;
        }
    }
    if !buf.is_empty() || shards.is_empty() {
        flush(&mut buf, &mut shards)?;
    }
    let manifest = DatasetManifest {
        name: info.name,
        pair_count: shards.iter().map(|s| s.records).sum(),
        provenance: info.provenance,
        quality_tier: info.quality_tier,
        synthetic: info.synthetic,
        shards,
    };
    write_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Renders a synthetic corpus into shards. Pairs are produced lazily, one shard at a time.
pub fn generate_synthetic_corpus(dir: &Path, name: &str, config: SyntheticConfig, shard_size: usize) -> Result<DatasetManifest> {
    let corpus = SyntheticCorpus::new(config.clone())?;
    let info = DatasetInfo { name: name.to_string(), provenance: Provenance::Synthetic, quality_tier: None, synthetic: Some(config) };
    let pairs = (0..corpus.len()).map(|i| {
        let p = corpus.pair(i);
        ImageTextPair { pair_id: p.pair_id, image: p.image, caption: p.caption, quality_score: None }
    });
    write_dataset(dir, info, pairs, shard_size)
}

/// One JSON object per line.
pub fn write_skip_report(path: &Path, skipped: &[SkipRecord]) -> Result<()> {
    let mut text = String::new();
    for s in skipped {
        text.push_str(&serde_json::to_string(s).expect("skip records serialize"));
        text.push('\n');
    }
    write(path, text)
}

pub fn save_tokenizer(path: &Path, tokenizer: &Tokenizer) -> Result<()> {
    write(path, tokenizer.to_vocab_text())
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    let path = resolve_data_path(path);
    Tokenizer::from_vocab_text(&read_to_string(&path)?).map_err(|e| LabError::format(&path, e.to_string()))
}
