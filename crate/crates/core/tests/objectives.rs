use clip_lab_core::model::{DualEncoderConfig, EncoderSpec};
use clip_lab_core::objectives::{clip_loss, kept_count, sample_kept, slip_loss, ssl_nt_xent_loss, StrategyConfig};
use clip_lab_core::rng::Rng;
use clip_lab_core::tensor::Tensor;
use clip_lab_core::train::flops::vision_tower_flops;
use clip_lab_core::train::{estimate_flops, estimate_gflops_per_sample};
use proptest::prelude::*;

fn mat(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

/// Textbook symmetric cross-entropy, written with explicit loops.
fn oracle_clip(l: &[Vec<f64>]) -> f64 {
    let n = l.len();
    let lse = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..n {
        rows += lse(&mut l[i].iter().cloned()) - l[i][i];
        cols += lse(&mut (0..n).map(|j| l[j][i])) - l[i][i];
    }
    (rows / n as f64 + cols / n as f64) / 2.0
}

/// NT-Xent by summing all 2N softmax terms over the joined views.
fn oracle_nt_xent(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let norm = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let z: Vec<Vec<f64>> = a.iter().chain(b).map(norm).collect();
    let n = a.len();
    let mut total = 0.0;
    for i in 0..2 * n {
        let pos = (i + n) % (2 * n);
        let sim = |j: usize| z[i].iter().zip(&z[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
        let denom: f64 = (0..2 * n).filter(|&j| j != i).map(|j| sim(j).exp()).sum();
        total += -(sim(pos).exp() / denom).ln();
    }
    total / (2 * n) as f64
}

#[test]
fn uniform_logits_cost_ln_n() {
    for n in [2usize, 4, 8, 64] {
        for c in [0.0, -3.5, 17.0] {
            let l = clip_loss(&Tensor::full(&[n, n], c)).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-9, "n={n} c={c}: {l}");
        }
    }
}

#[test]
fn two_by_two_hand_value() {
    // Rows cost ln(1+e^-2) and ln(1+e^-1); the matrix is symmetric so columns match.
    let want = ((1.0 + (-2.0f64).exp()).ln() + (1.0 + (-1.0f64).exp()).ln()) / 2.0;
    let got = clip_loss(&mat(&[vec![2.0, 0.0], vec![0.0, 1.0]])).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!((want - 0.220095).abs() < 5e-7);
}

#[test]
fn nt_xent_two_pair_case() {
    let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let b = vec![vec![0.8, 0.6], vec![0.0, 1.0]];
    let got = ssl_nt_xent_loss(&mat(&a), &mat(&b), 0.5).unwrap();
    assert!((got - oracle_nt_xent(&a, &b, 0.5)).abs() < 1e-9);
}

#[test]
fn slip_is_weighted_sum() {
    assert!((slip_loss(0.5, 0.25, 0.5).unwrap() - 0.625).abs() < 1e-12);
    assert!(slip_loss(0.5, 0.25, -1.0).is_err());
}

fn square(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-8.0f64..8.0, n), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn clip_loss_matches_textbook(l in (2usize..9).prop_flat_map(square)) {
        let got = clip_loss(&mat(&l)).unwrap();
        prop_assert!((got - oracle_clip(&l)).abs() < 1e-9);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn clip_loss_ignores_a_global_shift(l in (2usize..9).prop_flat_map(square), c in -50.0f64..50.0) {
        let shifted: Vec<Vec<f64>> = l.iter().map(|r| r.iter().map(|x| x + c).collect()).collect();
        let (a, b) = (clip_loss(&mat(&l)).unwrap(), clip_loss(&mat(&shifted)).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn clip_loss_is_invariant_to_reordering_pairs(l in (2usize..9).prop_flat_map(square), seed in any::<u64>()) {
        let n = l.len();
        let p = Rng::new(seed).permutation(n);
        let permuted: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| l[p[i]][p[j]]).collect()).collect();
        prop_assert!((clip_loss(&mat(&l)).unwrap() - clip_loss(&mat(&permuted)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn nt_xent_matches_direct_summation(
        (a, b) in (2usize..6, 2usize..5).prop_flat_map(|(n, d)| {
            let row = prop::collection::vec(0.1f64..2.0, d);
            (prop::collection::vec(row.clone(), n), prop::collection::vec(row, n))
        }),
        tau in 0.05f64..1.0,
    ) {
        let got = ssl_nt_xent_loss(&mat(&a), &mat(&b), tau).unwrap();
        prop_assert!((got - oracle_nt_xent(&a, &b, tau)).abs() < 1e-9 * got.abs().max(1.0));
    }
}

#[test]
fn flip_keeps_24_of_49_and_partitions() {
    assert_eq!(kept_count(49, 0.5).unwrap(), 24);
    for seed in 0..1000u64 {
        let kept = sample_kept(3, 49, 0.5, seed).unwrap();
        kept.check(3, 49).unwrap();
        for e in 0..3 {
            let row = kept.row(e);
            assert_eq!(row.len(), 24);
            let masked: Vec<usize> = (0..49).filter(|i| !row.contains(i)).collect();
            assert_eq!(masked.len(), 25);
            let mut union: Vec<usize> = row.iter().chain(&masked).copied().collect();
            union.sort_unstable();
            assert_eq!(union, (0..49).collect::<Vec<_>>());
        }
    }
}

#[test]
fn masks_are_seeded() {
    assert_eq!(sample_kept(4, 16, 0.5, 7).unwrap(), sample_kept(4, 16, 0.5, 7).unwrap());
    let differing = (0..100u64).filter(|&s| sample_kept(1, 16, 0.5, s).unwrap() != sample_kept(1, 16, 0.5, s + 1000).unwrap()).count();
    // Two independent 8-of-16 draws coincide with probability 1/12870.
    assert!(differing >= 99, "{differing}");
}

#[test]
fn token_linear_flops_scale_by_kept_fraction() {
    for name in ["vit_b32", "vit_b16", "vit_nano", "vit_pico"] {
        let spec = EncoderSpec::preset(name).unwrap();
        let p = spec.num_patches();
        let k = kept_count(p, 0.5).unwrap();
        let full = vision_tower_flops(&spec, p).unwrap().token_linear();
        let masked = vision_tower_flops(&spec, k).unwrap().token_linear();
        assert!((masked / full - k as f64 / p as f64).abs() < 1e-12, "{name}");
        // The same ratio read off the strategy-level counter.
        let cfg = DualEncoderConfig::new(spec, EncoderSpec::preset("text_pico").unwrap(), 32, 512);
        let a = estimate_flops(&cfg, &StrategyConfig::clip()).unwrap().vision.token_linear();
        let b = estimate_flops(&cfg, &StrategyConfig::flip(0.5)).unwrap().vision.token_linear();
        assert!((b / a - k as f64 / p as f64).abs() < 1e-12, "{name}");
    }
    assert_eq!(kept_count(EncoderSpec::preset("vit_b32").unwrap().num_patches(), 0.5).unwrap(), 24);
}

#[test]
fn slip_costs_at_least_double_the_vision_work() {
    for (v, t) in [("vit_b16", "text_base"), ("vit_b32", "text_base"), ("vit_nano", "text_nano"), ("vit_pico", "text_pico")] {
        let mut cfg = DualEncoderConfig::from_presets(v, t, 32, 512).unwrap();
        cfg.ssl_head_dim = Some(32);
        let clip = estimate_gflops_per_sample(&cfg, &StrategyConfig::clip()).unwrap();
        let slip = estimate_gflops_per_sample(&cfg, &StrategyConfig::slip()).unwrap();
        assert!(slip >= 1.9 * clip, "{v}/{t}: {slip} vs {clip}");
    }
}
