use std::path::{Path, PathBuf};

use clip_lab::config::{ExperimentConfig, SweepMode};
use clip_lab::error::LabError;
use clip_lab_core::objectives::StrategyKind;

const BASE: &str = r#"name = "base"
batch_size = 16
[dataset]
synthetic = { n_pairs = 200, n_classes = 8, caption_noise = 0.0, seed = 1 }
[tokenizer]
vocab_size = 128
[axes]
strategies = [{ kind = "clip" }]
vision = ["vit_pico"]
dataset_sizes = [100]
epochs = [1]
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// The line a `ConfigAt` error points at, with its file name.
fn location(err: LabError) -> (String, usize) {
    match err {
        LabError::ConfigAt { file, line, .. } => (file.file_name().unwrap().to_string_lossy().into_owned(), line),
        other => panic!("expected a located config error, got {other}"),
    }
}

#[test]
fn base_config_loads_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&write(dir.path(), "base.toml", BASE)).unwrap();
    assert_eq!(cfg.batch_size, 16);
    assert_eq!(cfg.mode, SweepMode::Epochs);
    assert_eq!(cfg.output_dir, dir.path().join("runs"));
    assert_eq!(cfg.axes.strategies[0].kind, StrategyKind::Clip);
}

#[test]
fn later_files_override_includes() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "base.toml", BASE);
    let top = write(dir.path(), "top.toml", "include = [\"base.toml\"]\nname = \"top\"\nbatch_size = 32\n[axes]\nvision = [\"vit_nano\"]\n");
    let cfg = ExperimentConfig::load(&top).unwrap();
    assert_eq!((cfg.name.as_str(), cfg.batch_size), ("top", 32));
    assert_eq!(cfg.axes.vision, vec!["vit_nano"]);
    // Untouched axes come from the include.
    assert_eq!(cfg.axes.dataset_sizes, vec![100]);
    assert_eq!(cfg.location("batch_size").1, 3);
}

#[test]
fn unknown_keys_point_at_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replace("[tokenizer]\n", "[tokenizer]\nvocab = 3\n");
    let err = ExperimentConfig::load(&write(dir.path(), "c.toml", &text)).unwrap_err();
    assert_eq!(location(err), ("c.toml".into(), 6));
    let err = ExperimentConfig::load(&write(dir.path(), "d.toml", &format!("batchsize = 4\n{BASE}"))).unwrap_err();
    assert_eq!(location(err), ("d.toml".into(), 1));
}

#[test]
fn include_cycles_and_missing_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.toml", "include = [\"b.toml\"]\n");
    let b = write(dir.path(), "b.toml", "include = [\"a.toml\"]\n");
    assert!(matches!(ExperimentConfig::load(&b), Err(LabError::ConfigAt { message, .. }) if message.contains("cycle")));
    let m = write(dir.path(), "m.toml", "name = \"m\"\n\ninclude = [\"nowhere.toml\"]\n");
    let err = ExperimentConfig::load(&m).unwrap_err();
    assert_eq!(location(err), ("m.toml".into(), 3));
}

#[test]
fn validation_errors_name_the_offending_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("vision = [\"vit_pico\"]", "vision = [\n  \"vit_pico\",\n  \"vit_huge\",\n]", 11),
        ("strategies = [{ kind = \"clip\" }]", "strategies = [\n  { kind = \"clip\" },\n  { kind = \"flip\", mask_ratio = 1.5 },\n]", 10),
        ("dataset_sizes = [100]", "dataset_sizes = [100, 8]", 10),
        ("dataset_sizes = [100]", "dataset_sizes = [\n  100,\n  500,\n]", 12),
        ("epochs = [1]", "epochs = [1, 0]", 11),
    ];
    for (from, to, line) in cases {
        let text = BASE.replace(from, to);
        let err = ExperimentConfig::load(&write(dir.path(), "v.toml", &text)).unwrap_err();
        assert_eq!(location(err), ("v.toml".into(), line), "{to}");
    }
}

#[test]
fn flip_needs_patch_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE
        .replace("strategies = [{ kind = \"clip\" }]", "strategies = [{ kind = \"clip\" }, { kind = \"flip\", mask_ratio = 0.5 }]")
        .replace("vision = [\"vit_pico\"]", "vision = [\"vit_pico\", \"cnn_nano\"]");
    let err = ExperimentConfig::load(&write(dir.path(), "f.toml", &text)).unwrap_err();
    assert!(err.to_string().contains("cnn_nano"), "{err}");
    assert_eq!(location(err).1, 8);
}

#[test]
fn fixed_samples_mode_needs_a_target() {
    let dir = tempfile::tempdir().unwrap();
    let err = ExperimentConfig::load(&write(dir.path(), "s.toml", &format!("mode = \"fixed-samples\"\n{BASE}"))).unwrap_err();
    assert_eq!(location(err).1, 1);
    assert_eq!(LabError::ConfigAt { file: "x".into(), line: 1, message: String::new() }.exit_code(), 2);
}
