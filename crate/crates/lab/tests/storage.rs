use clip_lab::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManager, KEEP_LAST};
use clip_lab::dataset::{generate_synthetic_corpus, load_dataset, load_tokenizer, save_tokenizer, write_dataset, DatasetInfo};
use clip_lab::error::LabError;
use clip_lab::shard::{encode_record, read_shard, write_shard, MAGIC};
use clip_lab_core::data::image::RgbImage;
use clip_lab_core::data::synthetic::SyntheticConfig;
use clip_lab_core::data::tokenizer::Tokenizer;
use clip_lab_core::data::{ImageTextPair, Provenance};
use clip_lab_core::model::{DualEncoder, DualEncoderConfig};
use clip_lab_core::tensor::Tensor;
use proptest::prelude::*;

fn pair(id: u64, w: usize, h: usize, caption: &str, score: Option<f64>) -> ImageTextPair {
    let data = (0..w * h * 3).map(|i| (i as u64 * 7 + id) as u8).collect();
    ImageTextPair { pair_id: id, image: RgbImage::new(w, h, data).unwrap(), caption: caption.into(), quality_score: score }
}

/// Builds a shard by hand so the reader is checked against the byte layout, not the writer.
fn raw_shard(bodies: &[Vec<u8>]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for b in bodies {
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        out.extend_from_slice(b);
    }
    out.extend_from_slice(&u32::MAX.to_le_bytes());
    out.extend_from_slice(&(bodies.len() as u64).to_le_bytes());
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn shards_round_trip(specs in prop::collection::vec((1usize..9, 1usize..9, "\\PC{0,30}", prop::option::of(-1.0f64..1.0)), 0..12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cbls");
        let pairs: Vec<ImageTextPair> = specs.iter().enumerate().map(|(i, (w, h, c, s))| pair(i as u64, *w, *h, c, *s)).collect();
        prop_assert_eq!(write_shard(&path, &pairs).unwrap(), pairs.len() as u64);
        let back = read_shard(&path).unwrap();
        prop_assert!(back.skipped.is_empty());
        prop_assert_eq!(back.pairs, pairs);
    }
}

#[test]
fn hand_built_shard_matches_the_writer() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = [pair(3, 2, 1, "a red bar", Some(0.5)), pair(9, 1, 1, "", None)];
    let path = dir.path().join("w.cbls");
    write_shard(&path, &pairs).unwrap();
    let bodies: Vec<Vec<u8>> = pairs.iter().map(encode_record).collect();
    assert_eq!(std::fs::read(&path).unwrap(), raw_shard(&bodies));
    // pair id, width, height, caption length, caption, score flag, score, pixels
    let b = &bodies[0];
    assert_eq!(b.len(), 8 + 4 + 4 + 4 + 9 + 1 + 8 + 6);
    assert_eq!(&b[20..29], b"a red bar");
    assert_eq!(b[29], 1);
    assert_eq!(f64::from_le_bytes(b[30..38].try_into().unwrap()), 0.5);
}

#[test]
fn undecodable_records_are_skipped_with_their_ids() {
    let dir = tempfile::tempdir().unwrap();
    let good = pair(1, 2, 2, "ok", None);
    let mut bad_utf8 = encode_record(&pair(2, 2, 2, "xy", None));
    bad_utf8[20] = 0xff;
    let mut bad_flag = encode_record(&pair(3, 2, 2, "z", None));
    bad_flag[21] = 7;
    let mut short_pixels = encode_record(&pair(4, 2, 2, "w", None));
    short_pixels.pop();
    let path = dir.path().join("mixed.cbls");
    std::fs::write(&path, raw_shard(&[encode_record(&good), bad_utf8, bad_flag, short_pixels])).unwrap();
    let got = read_shard(&path).unwrap();
    assert_eq!(got.pairs, vec![good]);
    let skipped: Vec<(u64, u64)> = got.skipped.iter().map(|s| (s.record, s.pair_id)).collect();
    assert_eq!(skipped, vec![(1, 2), (2, 3), (3, 4)]);
    assert!(got.skipped.iter().all(|s| !s.reason.is_empty() && s.shard.ends_with("mixed.cbls")));
}

#[test]
fn broken_framing_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let full = raw_shard(&[encode_record(&pair(1, 3, 3, "a", None))]);
    let cases = [
        ("truncated", full[..full.len() - 20].to_vec()),
        ("no footer", full[..full.len() - 12].to_vec()),
        ("bad magic", [b"XXXX\x01".as_slice(), &full[5..]].concat()),
    ];
    for (name, bytes) in cases {
        let path = dir.path().join(format!("{name}.cbls"));
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_shard(&path), Err(LabError::Format { .. })), "{name}");
    }
    let mut wrong_count = full.clone();
    let n = wrong_count.len();
    wrong_count[n - 8] = 5;
    let path = dir.path().join("count.cbls");
    std::fs::write(&path, wrong_count).unwrap();
    assert!(matches!(read_shard(&path), Err(LabError::Format { .. })));
}

#[test]
fn datasets_split_into_shards_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let pairs: Vec<ImageTextPair> = (0..25).map(|i| pair(i, 2, 3, &format!("caption {i}"), Some(i as f64 / 25.0))).collect();
    let info = DatasetInfo { name: "toy".into(), provenance: Provenance::External, quality_tier: None, synthetic: None };
    let manifest = write_dataset(dir.path(), info, pairs.clone(), 10).unwrap();
    assert_eq!(manifest.shards.len(), 3);
    assert!(dir.path().join("shard-00002.cbls").exists());
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.pairs, pairs);
    assert_eq!(back.manifest.name, "toy");
}

#[test]
fn synthetic_corpus_on_disk_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig::new(30, 8, 0.25, 4);
    generate_synthetic_corpus(dir.path(), "syn", cfg.clone(), 7).unwrap();
    let corpus = clip_lab_core::data::SyntheticCorpus::new(cfg).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.pairs.len(), 30);
    for (i, p) in back.pairs.iter().enumerate() {
        let want = corpus.pair(i);
        assert_eq!((p.pair_id, &p.image, &p.caption), (i as u64, &want.image, &corpus.caption(i)));
    }
}

#[test]
fn tokenizer_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let tok = Tokenizer::train(["a red bar", "a blue column"], 64).unwrap();
    let path = dir.path().join("tok.txt");
    save_tokenizer(&path, &tok).unwrap();
    let back = load_tokenizer(&path).unwrap();
    assert_eq!(back.tokenize("a red column"), tok.tokenize("a red column"));
}

fn tiny_model(seed: u64) -> DualEncoder<f32> {
    DualEncoder::build(&DualEncoderConfig::from_presets("vit_pico", "text_pico", 16, 64).unwrap(), seed).unwrap()
}

#[test]
fn checkpoints_reproduce_embeddings_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(3);
    save_checkpoint(dir.path(), &model).unwrap();
    let back = load_checkpoint(dir.path(), Some(model.config())).unwrap();
    let images = Tensor::new(&[2, 32, 32, 3], (0..2 * 32 * 32 * 3).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect()).unwrap();
    let mut t = vec![1u32, 5, 6, 2];
    t.resize(clip_lab_core::CONTEXT_LENGTH, 0);
    let tokens = vec![t; 2];
    let bits = |t: Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(model.encode_image(&images).unwrap()), bits(back.encode_image(&images).unwrap()));
    assert_eq!(bits(model.encode_text(&tokens).unwrap()), bits(back.encode_text(&tokens).unwrap()));
}

#[test]
fn checkpoint_with_another_architecture_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &tiny_model(0)).unwrap();
    let other = DualEncoderConfig::from_presets("vit_pico", "text_pico", 8, 64).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), Some(&other)), Err(LabError::Config(_))));
}

#[test]
fn manager_keeps_the_last_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut mgr = CheckpointManager::new(dir.path().to_path_buf());
    let model = tiny_model(1);
    for step in [10, 20, 30, 40, 50] {
        mgr.save(&model, step).unwrap();
    }
    let mut left: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    left.sort();
    assert_eq!(left.len(), KEEP_LAST);
    assert_eq!(left, vec!["step-00000030", "step-00000040", "step-00000050"]);
    assert!(mgr.latest().unwrap().ends_with("step-00000050"));
}
