use std::path::{Path, PathBuf};

use clip_lab_core::error::Error as CoreError;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// Configuration problem located at `file:line`.
    #[error("{}:{line}: {message}", file.display())]
    ConfigAt { file: PathBuf, line: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("planning error: {0}")]
    Plan(String),
    #[error("reporting error: {0}")]
    Report(String),
    #[error("{failed} of {total} runs failed")]
    PartialFailure { failed: usize, total: usize },
}

impl LabError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        LabError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        LabError::Format { path: path.as_ref().to_path_buf(), message: message.into() }
    }

    /// Process exit status: 2 for configuration problems, 3 for a sweep with failed runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::ConfigAt { .. } | LabError::Config(_) | LabError::Plan(_) => 2,
            LabError::Core(CoreError::Config(_)) => 2,
            LabError::PartialFailure { .. } => 3,
            _ => 1,
        }
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}
