use clip_lab_core::data::image::RgbImage;
use clip_lab_core::data::synthetic::{SyntheticConfig, SyntheticCorpus, CAPTION_TEMPLATES};
use clip_lab_core::data::tokenizer::Tokenizer;
use clip_lab_core::eval::probe::{few_shot_accuracy_features, linear_probe_features, train_linear_classifier, FewShotMethod, ProbeConfig};
use clip_lab_core::eval::{
    build_zero_shot_classifier, classifier_from_prompt_embeddings, crop_geometry, embed_images, eval_preprocess, recall_at_1_from_similarity,
    retrieval_recall_at_1, zero_shot_accuracy, zero_shot_predictions, ClassificationTask, RetrievalTask,
};
use clip_lab_core::model::{DualEncoder, DualEncoderConfig, EncoderSpec};
use clip_lab_core::rng::Rng;
use clip_lab_core::tensor::Tensor;
use clip_lab_core::Error;
use proptest::prelude::*;

fn random_image(rng: &mut Rng, w: usize, h: usize) -> RgbImage {
    RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.below(256) as u8).collect()).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// First index of the maximum, by a plain scan.
fn first_max(v: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

// ---- preprocessing

#[test]
fn square_256_input_is_a_plain_center_crop() {
    let mut rng = Rng::new(3);
    let img = random_image(&mut rng, 256, 256);
    let out: Tensor<f64> = eval_preprocess(&img, 224).unwrap();
    assert_eq!(out.shape(), &[224, 224, 3]);
    for y in (0..224).step_by(7) {
        for x in (0..224).step_by(5) {
            let px = img.pixel(x + 16, y + 16);
            for c in 0..3 {
                let want = px[c] as f64 / 127.5 - 1.0;
                let got = out.data()[(y * 224 + x) * 3 + c];
                assert!((got - want).abs() < 1e-6, "({x},{y},{c}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn tall_input_geometry() {
    // Short side 224 goes to 224/0.875 = 256, so 448 becomes 512; offsets are the halved slack.
    let ((sw, sh), (ox, oy)) = crop_geometry(224, 448, 224);
    assert_eq!((sw, sh), (256, 512));
    assert_eq!((ox, oy), ((256 - 224) / 2, (512 - 224) / 2));
    assert_eq!((ox, oy), (16, 144));
}

#[test]
fn too_small_images_are_format_errors() {
    let img = RgbImage::filled(7, 30, [1, 2, 3]);
    assert!(matches!(eval_preprocess::<f32>(&img, 32), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eval_preprocess_is_deterministic_and_bounded(w in 8usize..90, h in 8usize..90, target in 4usize..48, seed in any::<u64>()) {
        let img = random_image(&mut Rng::new(seed), w, h);
        let a: Tensor<f64> = eval_preprocess(&img, target).unwrap();
        let b: Tensor<f64> = eval_preprocess(&img, target).unwrap();
        prop_assert_eq!(a.shape(), &[target, target, 3]);
        prop_assert!(a == b);
        prop_assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

// ---- zero-shot

#[test]
fn orthogonal_prompts_average_to_unit_diagonal() {
    let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let w = classifier_from_prompt_embeddings(&[e]).unwrap();
    let h = 0.5f64.sqrt();
    assert!((w.data()[0] - h).abs() < 1e-12 && (w.data()[1] - h).abs() < 1e-12);
}

#[test]
fn perfect_embeddings_score_one() {
    let classes = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let w = classifier_from_prompt_embeddings(&[classes.select_rows(&[0]), classes.select_rows(&[1]), classes.select_rows(&[2])]).unwrap();
    let imgs = classes.select_rows(&[2, 0, 1, 1]);
    assert_eq!(zero_shot_predictions(&imgs, &w).unwrap(), vec![2, 0, 1, 1]);
}

fn embedding_sets() -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
    (1usize..6, 1usize..5, 2usize..8).prop_flat_map(|(c, p, d)| {
        prop::collection::vec(prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), p), c)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn classifier_rows_are_unit(sets in embedding_sets()) {
        let per_class: Vec<Tensor<f64>> = sets.iter().map(|s| Tensor::from_rows(s).unwrap()).collect();
        match classifier_from_prompt_embeddings(&per_class) {
            Ok(w) => {
                for r in 0..w.rows() {
                    let n: f64 = w.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    prop_assert!((n - 1.0).abs() < 1e-6);
                }
            }
            // Only degenerate draws (a zero prompt or prompts that cancel) may fail.
            Err(e) => prop_assert!(matches!(e, Error::Numeric(_)), "{e}"),
        }
    }

    #[test]
    fn predictions_ignore_positive_rescaling(
        (imgs, w) in (2usize..6, 2usize..5).prop_flat_map(|(d, c)| (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 1..12),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), c),
        )),
        s in 0.01f64..100.0,
    ) {
        prop_assume!(imgs.iter().chain(&w).all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let w = classifier_from_prompt_embeddings(&w.iter().map(|r| Tensor::from_rows(&[r.clone()]).unwrap()).collect::<Vec<_>>()).unwrap();
        let a = Tensor::from_rows(&imgs).unwrap();
        let b = a.map(|x| x * s);
        prop_assert_eq!(zero_shot_predictions(&a, &w).unwrap(), zero_shot_predictions(&b, &w).unwrap());
    }
}

fn tiny_model(seed: u64, vocab: usize) -> DualEncoder<f32> {
    let cfg = DualEncoderConfig::new(EncoderSpec::vit(8, 1, 16, 2, 32), EncoderSpec::text(1, 16, 2), 8, vocab);
    DualEncoder::build(&cfg, seed).unwrap()
}

fn synthetic_task(n: usize, seed: u64) -> (SyntheticCorpus, ClassificationTask, Tokenizer) {
    let corpus = SyntheticCorpus::new(SyntheticConfig::new(n, 8, 0.0, seed)).unwrap();
    let caps: Vec<String> = (0..n).map(|i| corpus.caption(i)).collect();
    let tok = Tokenizer::train(caps.iter().map(|s| s.as_str()), 128).unwrap();
    let task = ClassificationTask {
        class_names: corpus.class_names(),
        prompt_templates: CAPTION_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        examples: (0..n).map(|i| {
            let p = corpus.pair(i);
            (p.image, p.image_class)
        })
        .collect(),
    };
    (corpus, task, tok)
}

#[test]
fn zero_shot_matches_brute_force_example_for_example() {
    let (_, task, tok) = synthetic_task(60, 5);
    let model = tiny_model(1, tok.vocab_size());
    let w = build_zero_shot_classifier(&model, &task, &tok).unwrap();
    let imgs: Vec<&RgbImage> = task.examples.iter().map(|e| &e.0).collect();
    let emb = embed_images(&model, &imgs).unwrap();
    let got = zero_shot_predictions(&emb, &w).unwrap();
    let want: Vec<usize> = (0..emb.rows()).map(|i| first_max(&(0..w.rows()).map(|c| cosine(emb.row(i), w.row(c))).collect::<Vec<_>>())).collect();
    assert_eq!(got, want);
    let acc = zero_shot_accuracy(&model, &w, &task).unwrap();
    let hits = want.iter().zip(task.labels()).filter(|(p, l)| **p == *l).count();
    assert_eq!(acc, hits as f64 / task.examples.len() as f64);
}

#[test]
fn evaluation_ignores_the_logit_scale() {
    let (corpus, task, tok) = synthetic_task(24, 6);
    let retrieval = RetrievalTask {
        images: task.examples.iter().map(|e| e.0.clone()).collect(),
        captions: (0..corpus.len()).map(|i| corpus.caption(i)).collect(),
        caption_image: (0..corpus.len()).map(Some).collect(),
    };
    let mut rng = Rng::new(11);
    for seed in 0..50 {
        let mut model = tiny_model(seed, tok.vocab_size());
        let w = build_zero_shot_classifier(&model, &task, &tok).unwrap();
        let zs = zero_shot_accuracy(&model, &w, &task).unwrap();
        let r = retrieval_recall_at_1(&model, &retrieval, &tok).unwrap();
        let id = model.logit_scale_param();
        model.params_mut().get_mut(id).data_mut()[0] = (rng.uniform() * 4.0 - 2.0) as f32;
        let w2 = build_zero_shot_classifier(&model, &task, &tok).unwrap();
        assert_eq!(zs, zero_shot_accuracy(&model, &w2, &task).unwrap());
        assert_eq!(r, retrieval_recall_at_1(&model, &retrieval, &tok).unwrap());
    }
}

// ---- retrieval

/// Recall@1 both ways by scanning every image/caption pair.
fn brute_recall(img: &[Vec<f64>], txt: &[Vec<f64>], gt: &[usize]) -> (f64, f64) {
    let sim = |i: usize, j: usize| cosine(&img[i], &txt[j]);
    let mut t_hits = 0;
    for i in 0..img.len() {
        let mut best = 0;
        for j in 1..txt.len() {
            if sim(i, j) > sim(i, best) {
                best = j;
            }
        }
        if gt[best] == i {
            t_hits += 1;
        }
    }
    let mut i_hits = 0;
    for j in 0..txt.len() {
        let mut best = 0;
        for i in 1..img.len() {
            if sim(i, j) > sim(best, j) {
                best = i;
            }
        }
        if best == gt[j] {
            i_hits += 1;
        }
    }
    (t_hits as f64 / img.len() as f64, i_hits as f64 / txt.len() as f64)
}

/// Cosine matrix as the library computes it: unit rows, then one product.
fn library_similarity(img: &[Vec<f64>], txt: &[Vec<f64>]) -> Tensor<f64> {
    let a = clip_lab_core::model::normalize_rows(&Tensor::from_rows(img).unwrap()).unwrap();
    let b = clip_lab_core::model::normalize_rows(&Tensor::from_rows(txt).unwrap()).unwrap();
    a.matmul(&b.transpose()).unwrap()
}

#[test]
fn recall_matches_brute_force_on_1000_instances() {
    let mut rng = Rng::new(2024);
    for trial in 0..1000 {
        let n = 1 + rng.below(128);
        let d = 2 + rng.below(6);
        // Half the trials use signed basis vectors so exact ties are common.
        let discrete = trial % 2 == 1;
        let draw = |rng: &mut Rng| -> Vec<f64> {
            if discrete {
                let mut v = vec![0.0; d];
                v[rng.below(d)] = if rng.below(2) == 0 { 1.0 } else { -1.0 };
                v
            } else {
                (0..d).map(|_| rng.normal()).collect()
            }
        };
        let img: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
        let captions = n + rng.below(n + 1);
        let txt: Vec<Vec<f64>> = (0..captions).map(|_| draw(&mut rng)).collect();
        let gt: Vec<usize> = (0..captions).map(|j| if j < n { j } else { rng.below(n) }).collect();
        let got = recall_at_1_from_similarity(&library_similarity(&img, &txt), &gt).unwrap();
        let (t, i) = brute_recall(&img, &txt, &gt);
        assert_eq!((got.text_retrieval, got.image_retrieval), (t, i), "trial {trial}");
    }
}

#[test]
fn every_image_nearest_caption_zero() {
    // Caption 0 sits closest to every image, so only image 0 (its ground truth) is a text hit.
    let img = vec![vec![1.0, 0.1], vec![1.0, 0.2], vec![1.0, -0.1], vec![1.0, 0.0]];
    let txt = vec![vec![1.0, 0.05], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
    let r = recall_at_1_from_similarity(&library_similarity(&img, &txt), &[0, 1, 2, 3]).unwrap();
    assert_eq!(r.text_retrieval, 1.0 / 4.0);
    assert_eq!((r.text_retrieval, r.image_retrieval), brute_recall(&img, &txt, &[0, 1, 2, 3]));
}

#[test]
fn identical_embeddings_recall_everything() {
    let e: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let r = recall_at_1_from_similarity(&library_similarity(&e, &e), &[0, 1, 2, 3, 4, 5]).unwrap();
    assert_eq!((r.text_retrieval, r.image_retrieval), (1.0, 1.0));
}

#[test]
fn caption_without_ground_truth_is_rejected() {
    let task = RetrievalTask {
        images: vec![RgbImage::filled(32, 32, [0, 0, 0])],
        captions: vec!["a".into(), "b".into()],
        caption_image: vec![Some(0), None],
    };
    let tok = Tokenizer::train(["a b"], 16).unwrap();
    let err = retrieval_recall_at_1(&tiny_model(0, tok.vocab_size()), &task, &tok).unwrap_err();
    assert!(matches!(err, Error::Validation(_)) && err.to_string().contains("caption 1"), "{err}");
}

// ---- probes

/// Gaussian blobs around distinct one-hot centres.
fn blobs(classes: usize, per_class: usize, d: usize, noise: f64, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..classes * per_class {
        let c = i % classes;
        rows.push((0..d).map(|j| if j == c { 3.0 } else { 0.0 } + noise * rng.normal()).collect::<Vec<f64>>());
        y.push(c);
    }
    (Tensor::from_rows(&rows).unwrap(), y)
}

#[test]
fn separable_blobs_probe_perfectly() {
    let (x, y) = blobs(4, 30, 6, 0.3, 1);
    let (tx, ty) = blobs(4, 20, 6, 0.3, 2);
    let r = linear_probe_features(&x, &y, &tx, &ty, 4, &ProbeConfig::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.grid.len(), 7);
}

#[test]
fn single_rate_grid_is_a_direct_fit() {
    let (x, y) = blobs(3, 20, 5, 1.5, 3);
    let (tx, ty) = blobs(3, 20, 5, 1.5, 4);
    let cfg = ProbeConfig { lr_grid: vec![1e-2], ..ProbeConfig::default() };
    let r = linear_probe_features(&x, &y, &tx, &ty, 3, &cfg).unwrap();
    let direct = train_linear_classifier(&x, &y, 3, 1e-2, cfg.epochs).unwrap().predict(&tx).unwrap();
    let acc = direct.iter().zip(&ty).filter(|(p, t)| p == t).count() as f64 / ty.len() as f64;
    assert_eq!(r.accuracy, acc);
    assert_eq!(r.grid[0].val_accuracy, None);
}

#[test]
fn diverging_rates_are_recorded_not_fatal() {
    let (x, y) = blobs(3, 20, 5, 0.5, 3);
    let cfg = ProbeConfig { lr_grid: vec![1e-2, f64::MAX], ..ProbeConfig::default() };
    let r = linear_probe_features(&x, &y, &x, &y, 3, &cfg).unwrap();
    assert_eq!(r.lr, 1e-2);
    assert!(r.grid[0].val_accuracy.is_some());
    assert_eq!(r.grid[1].val_accuracy, None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn probe_is_invariant_to_relabeling(seed in any::<u64>()) {
        let (x, y) = blobs(3, 15, 4, 1.2, seed);
        let (tx, ty) = blobs(3, 10, 4, 1.2, seed ^ 1);
        let perm = Rng::new(seed).permutation(3);
        let py: Vec<usize> = y.iter().map(|&c| perm[c]).collect();
        let pty: Vec<usize> = ty.iter().map(|&c| perm[c]).collect();
        let cfg = ProbeConfig { lr_grid: vec![1e-2, 1e-1], seed, ..ProbeConfig::default() };
        let a = linear_probe_features(&x, &y, &tx, &ty, 3, &cfg).unwrap();
        let b = linear_probe_features(&x, &py, &tx, &pty, 3, &cfg).unwrap();
        prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
    }
}

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("class {i}")).collect()
}

#[test]
fn few_shot_with_every_example_equals_a_fixed_rate_probe() {
    let (x, y) = blobs(3, 6, 5, 1.5, 7);
    let (tx, ty) = blobs(3, 10, 5, 1.5, 8);
    let few = few_shot_accuracy_features(&x, &y, &tx, &ty, &names(3), 6, 0, FewShotMethod::LinearProbe).unwrap();
    let cfg = ProbeConfig { lr_grid: vec![1e-3], ..ProbeConfig::default() };
    let probe = linear_probe_features(&x, &y, &tx, &ty, 3, &cfg).unwrap();
    assert!((few - probe.accuracy).abs() < 1e-12, "{few} vs {}", probe.accuracy);
}

#[test]
fn noiseless_orthogonal_classes_are_learned_from_five_shots() {
    let (x, y) = blobs(5, 12, 8, 0.0, 9);
    let (tx, ty) = blobs(5, 4, 8, 0.0, 10);
    for method in [FewShotMethod::LinearProbe, FewShotMethod::Prototype] {
        let a = few_shot_accuracy_features(&x, &y, &tx, &ty, &names(5), 5, 3, method).unwrap();
        assert_eq!(a, 1.0, "{method:?}");
        assert_eq!(a, few_shot_accuracy_features(&x, &y, &tx, &ty, &names(5), 5, 3, method).unwrap());
    }
}

#[test]
fn short_class_is_named() {
    let (x, mut y) = blobs(3, 6, 4, 0.5, 1);
    for l in y.iter_mut() {
        if *l == 2 {
            *l = 1;
        }
    }
    y[2] = 2;
    let err = few_shot_accuracy_features(&x, &y, &x, &y, &names(3), 5, 0, FewShotMethod::LinearProbe).unwrap_err();
    assert!(matches!(err, Error::Validation(_)) && err.to_string().contains("class 2"), "{err}");
}
