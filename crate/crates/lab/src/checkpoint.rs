//! Checkpoint directories: `model.toml` (tower specs, projection and vocab)
//! next to `weights.safetensors`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clip_lab_core::model::{DualEncoder, DualEncoderConfig};
use clip_lab_core::tensor::Tensor;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{read_to_string, write, LabError, Result};

pub const MODEL_FILE: &str = "model.toml";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const KEEP_LAST: usize = 3;

pub fn save_checkpoint(dir: &Path, model: &DualEncoder<f32>) -> Result<()> {
    let cfg = toml::to_string(model.config()).map_err(|e| LabError::format(dir, e.to_string()))?;
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect(), p.value.shape().to_vec()))
        .collect();
    let mut views = BTreeMap::new();
    for (name, data, shape) in &bytes {
        let view = TensorView::new(Dtype::F32, shape.clone(), data).map_err(|e| LabError::format(dir, e.to_string()))?;
        views.insert(name.as_str(), view);
    }
    let archive = safetensors::serialize(views, &None).map_err(|e| LabError::format(dir, e.to_string()))?;
    write(&dir.join(MODEL_FILE), cfg)?;
    write(&dir.join(WEIGHTS_FILE), archive)
}

pub fn read_checkpoint_config(dir: &Path) -> Result<DualEncoderConfig> {
    let path = dir.join(MODEL_FILE);
    let text = read_to_string(&path)?;
    let cfg: DualEncoderConfig = toml::from_str(&text).map_err(|e| crate::config::toml_error(&path, &text, &e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint; when `expected` is given the stored configuration must match it.
pub fn load_checkpoint(dir: &Path, expected: Option<&DualEncoderConfig>) -> Result<DualEncoder<f32>> {
    let cfg = read_checkpoint_config(dir)?;
    if let Some(want) = expected {
        if *want != cfg {
            return Err(LabError::Config(format!("checkpoint {} was saved for a different model configuration", dir.display())));
        }
    }
    let path = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
    let archive = SafeTensors::deserialize(&bytes).map_err(|e| LabError::format(&path, e.to_string()))?;
    let mut model = DualEncoder::<f32>::build(&cfg, 0)?;
    if archive.len() != model.params().len() {
        return Err(LabError::format(&path, format!("archive holds {} tensors, model has {}", archive.len(), model.params().len())));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        let view = archive.tensor(&name).map_err(|e| LabError::format(&path, format!("{name}: {e}")))?;
        let want = model.params().get(id).shape().to_vec();
        if view.dtype() != Dtype::F32 || view.shape() != want.as_slice() {
            return Err(LabError::format(&path, format!("{name} is {:?} {:?}, expected F32 {:?}", view.dtype(), view.shape(), want)));
        }
        let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        *model.params_mut().get_mut(id) = Tensor::new(&want, data)?;
    }
    Ok(model)
}

/// Writes `step-NNNNNNNN` checkpoints under `root` and keeps the newest three.
pub struct CheckpointManager {
    root: PathBuf,
    saved: Vec<PathBuf>,
}

impl CheckpointManager {
    pub fn new(root: PathBuf) -> Self {
        CheckpointManager { root, saved: Vec::new() }
    }

    pub fn save(&mut self, model: &DualEncoder<f32>, step: usize) -> Result<PathBuf> {
        let dir = self.root.join(format!("step-{step:08}"));
        if self.saved.last() == Some(&dir) {
            return Ok(dir);
        }
        save_checkpoint(&dir, model)?;
        self.saved.push(dir.clone());
        while self.saved.len() > KEEP_LAST {
            let old = self.saved.remove(0);
            std::fs::remove_dir_all(&old).map_err(|e| LabError::io(&old, e))?;
        }
        Ok(dir)
    }

    pub fn latest(&self) -> Option<&Path> {
        self.saved.last().map(|p| p.as_path())
    }

    pub fn saved(&self) -> &[PathBuf] {
        &self.saved
    }
}
