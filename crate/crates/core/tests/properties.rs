mod common;

use multiads::adapter::{
    project, similarity_map, softmax_rows, AdapterParams, SimilarityMapStack, StageAdapter,
};
use multiads::dataio::build_multi_defect_map;
use multiads::encoder::mock::{MockBackend, MockConfig};
use multiads::encoder::{encode_text_state, ImageEncoder, ImageInput};
use multiads::fewshot::{batched_scores, build_bank, reference_map, MemoryBank};
use multiads::infer::upsample::upsample;
use multiads::infer::{anomaly_map, classify_pixels, AnomalyMap, MultiDefectMap, UpsampleMode};
use multiads::kba::bundled;
use multiads::loss::{dice_loss, focal_loss};
use multiads::metrics::{
    aupro, auroc, average_precision, f1_max, pro_curve, trapezoid_until, ScoredSet,
};
use multiads::prompts::{build_all, build_state_roster, PromptSet};
use ndarray::{Array1, Array2, Array3, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scored(seed: u64, n: usize) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n)
        .map(|_| (r.random_range(0..12) as f64) / 4.0 - 1.0)
        .collect();
    (scores, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_metrics_ignore_increasing_transforms(seed in any::<u64>(), n in 2usize..40) {
        let (scores, labels) = scored(seed, n);
        let a = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        let b = ScoredSet::new(scores.iter().map(|s| (3.0 * s).exp() + 7.0).collect(), labels).unwrap();
        prop_assert!((auroc(&a).unwrap() - auroc(&b).unwrap()).abs() < 1e-12);
        prop_assert!((average_precision(&a).unwrap() - average_precision(&b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auroc_is_symmetric_under_flip_and_negation(seed in any::<u64>(), n in 2usize..40) {
        let (scores, labels) = scored(seed, n);
        let a = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        let b = ScoredSet::new(scores.iter().map(|s| -s).collect(), labels.iter().map(|l| !l).collect()).unwrap();
        prop_assert!((auroc(&a).unwrap() - auroc(&b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn f1_max_dominates_any_threshold(seed in any::<u64>(), n in 2usize..40, t in -1.5f64..2.0) {
        let (scores, labels) = scored(seed, n);
        let best = f1_max(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for (s, l) in scores.iter().zip(&labels) {
            match (*s >= t, *l) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnn += 1.0,
                _ => {}
            }
        }
        prop_assert!(best + 1e-12 >= 2.0 * tp / (2.0 * tp + fp + fnn));
    }

    #[test]
    fn unnormalized_aupro_grows_with_limit(seed in any::<u64>(), lo in 0.05f64..0.5, extra in 0.0f64..0.5) {
        let mut r = rng(seed);
        let mask = Array2::from_shape_fn((10, 10), |(y, x)| (2..5).contains(&y) && (3..7).contains(&x));
        let map = Array2::from_shape_fn((10, 10), |(y, x)| r.random::<f64>() + if mask[[y, x]] { 0.3 } else { 0.0 });
        let curve = pro_curve(&[map.view()], &[mask.view()]).unwrap();
        let hi = (lo + extra).min(1.0);
        prop_assert!(trapezoid_until(&curve, lo) <= trapezoid_until(&curve, hi) + 1e-12);
        let normalized = aupro(&[map.view()], &[mask.view()], lo).unwrap();
        prop_assert!((normalized * lo - trapezoid_until(&curve, lo)).abs() < 1e-12);
    }

    #[test]
    fn focal_loss_is_nonnegative_and_falls_with_confidence(p in 0.001f64..0.999, dp in 0.0f64..0.5, gamma in 0.0f64..5.0) {
        let q = (p + dp).min(0.999);
        let at = |p: f64| {
            let probs = Array3::from_shape_vec((2, 1, 1), vec![p, 1.0 - p]).unwrap();
            focal_loss(probs.view(), Array2::zeros((1, 1)).view(), gamma).unwrap().0
        };
        prop_assert!(at(p) >= 0.0);
        prop_assert!(at(q) <= at(p) + 1e-15);
    }

    #[test]
    fn dice_loss_is_bounded_and_pixel_order_free(seed in any::<u64>(), n in 1usize..30, eps in 0.01f64..2.0) {
        let mut r = rng(seed);
        let pred: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let target: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let loss = |idx: &[usize]| {
            let p = Array2::from_shape_fn((1, n), |(_, i)| pred[idx[i]]);
            let t = Array2::from_shape_fn((1, n), |(_, i)| target[idx[i]]);
            dice_loss(p.view(), t.view(), eps).unwrap().0
        };
        let identity: Vec<usize> = (0..n).collect();
        let base = loss(&identity);
        prop_assert!((0.0..1.0).contains(&base));
        prop_assert!((base - loss(&order)).abs() < 1e-12);
    }

    #[test]
    fn argmax_ignores_a_constant_similarity_shift(seed in any::<u64>(), shift in -5.0f64..5.0, tau in 0.01f64..1.0) {
        let mut r = rng(seed);
        let sims = Array2::from_shape_fn((6, 4), |_| r.random_range(-1.0..1.0));
        let mut a = sims.clone();
        let mut b = sims.mapv(|v| v + shift);
        softmax_rows(&mut a, tau);
        softmax_rows(&mut b, tau);
        let argmax = |m: &Array2<f64>| -> Vec<usize> {
            m.rows().into_iter().map(|row| {
                row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
            }).collect()
        };
        prop_assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn projection_is_scale_free_without_bias(seed in any::<u64>(), alpha in 0.01f64..50.0) {
        let mut r = rng(seed);
        let mut params = random_params(&mut r, &[5], 4, 0.07);
        params.stages[0].bias.fill(0.0);
        let grid = Array3::from_shape_fn((2, 3, 5), |_| gaussian(&mut r) as f32);
        let scaled = grid.mapv(|v| (f64::from(v) * alpha) as f32);
        let a = project(&params, grid.view(), 0).unwrap();
        let b = project(&params, scaled.view(), 0).unwrap();
        // scaling in f32 costs a few ulps
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn similarity_channels_follow_text_rows(seed in any::<u64>()) {
        let mut r = rng(seed);
        let text = random_text(&mut r, 4, 5);
        let adapted = Array3::from_shape_fn((3, 2, 5), |_| gaussian(&mut r));
        // normal stays first; defect rows are shuffled
        let mut order: Vec<usize> = (1..4).collect();
        order.shuffle(&mut r);
        order.insert(0, 0);
        let ids: Vec<String> = order.iter().map(|&i| text.state_ids()[i].clone()).collect();
        let permuted = text.select(&ids).unwrap();
        let a = similarity_map(adapted.view(), &text, 0.07).unwrap();
        let b = similarity_map(adapted.view(), &permuted, 0.07).unwrap();
        prop_assert!(max_abs(&(a.select(Axis(0), &order) - &b)) < 1e-15);
    }

    #[test]
    fn upsampling_keeps_probability_sums(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, hh in 6usize..20, ww in 6usize..20) {
        let mut r = rng(seed);
        let mut flat = Array2::from_shape_fn((h * w, 3), |_| r.random_range(-1.0..1.0));
        softmax_rows(&mut flat, 0.3);
        let stack = Array3::from_shape_fn((3, h, w), |(k, y, x)| flat[[y * w + x, k]]);
        for mode in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
            let up = upsample(stack.view(), hh, ww, mode).unwrap();
            prop_assert!(up.sum_axis(Axis(0)).iter().all(|s| (s - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn argmax_ignores_monotone_transforms(seed in any::<u64>()) {
        let mut r = rng(seed);
        let probs = Array3::from_shape_fn((4, 5, 5), |_| r.random_range(0..6) as f64 / 5.0);
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let a = classify_pixels(&MultiDefectMap::new(probs.clone(), ids.clone()).unwrap());
        let b = classify_pixels(&MultiDefectMap::new(probs.mapv(|p| (2.0 * p).exp()), ids).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn defect_state_permutation_leaves_anomaly_map(seed in any::<u64>()) {
        let mut r = rng(seed);
        let emb = random_embeddings(&mut r, &[(3, 3, 4), (2, 2, 4)], 5);
        let params = random_params(&mut r, &[4, 4], 5, 0.07);
        let text = random_text(&mut r, 4, 5);
        let ids = vec![text.state_ids()[0].clone(), text.state_ids()[3].clone(), text.state_ids()[1].clone(), text.state_ids()[2].clone()];
        let permuted = text.select(&ids).unwrap();
        let a = anomaly_map(&SimilarityMapStack::compute(&params, &emb, &text).unwrap(), 9, 9, UpsampleMode::Bilinear).unwrap();
        let b = anomaly_map(&SimilarityMapStack::compute(&params, &emb, &permuted).unwrap(), 9, 9, UpsampleMode::Bilinear).unwrap();
        prop_assert!(max_abs(&(a.scores - b.scores)) < 1e-12);
    }

    #[test]
    fn reference_map_ignores_bank_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let refs = vec![random_embeddings(&mut r, &[(3, 3, 4)], 5), random_embeddings(&mut r, &[(3, 3, 4)], 5)];
        let query = random_embeddings(&mut r, &[(3, 3, 4)], 5);
        let params = random_params(&mut r, &[4], 5, 0.07);
        let bank = build_bank(&refs, &params).unwrap();
        let mut order: Vec<usize> = (0..bank.len(0)).collect();
        order.shuffle(&mut r);
        let shuffled = MemoryBank { stages: vec![bank.stages[0].select(Axis(0), &order)] };
        let a = reference_map(&query, &bank, &params, 6, 6, UpsampleMode::Bilinear).unwrap();
        let b = reference_map(&query, &shuffled, &params, 6, 6, UpsampleMode::Bilinear).unwrap();
        prop_assert!(max_abs(&(a.scores - b.scores)) == 0.0);
    }

    #[test]
    fn growing_the_bank_never_raises_scores(seed in any::<u64>()) {
        let mut r = rng(seed);
        let refs = vec![random_embeddings(&mut r, &[(2, 3, 4)], 5), random_embeddings(&mut r, &[(2, 3, 4)], 5)];
        let query = random_embeddings(&mut r, &[(2, 3, 4)], 5);
        let params = random_params(&mut r, &[4], 5, 0.07);
        let small = build_bank(&refs[..1], &params).unwrap();
        let large = build_bank(&refs, &params).unwrap();
        let a = reference_map(&query, &small, &params, 2, 3, UpsampleMode::Nearest).unwrap();
        let b = reference_map(&query, &large, &params, 2, 3, UpsampleMode::Nearest).unwrap();
        prop_assert!(a.scores.iter().zip(&b.scores).all(|(x, y)| y <= x));
    }

    #[test]
    fn batched_scores_follow_test_set_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let params = random_params(&mut r, &[4, 3], 5, 0.07);
        let set: Vec<_> = (0..4).map(|_| random_embeddings(&mut r, &[(2, 2, 4), (3, 3, 3)], 5)).collect();
        let zs: Vec<AnomalyMap> = (0..4).map(|_| AnomalyMap { scores: Array2::from_shape_fn((6, 6), |_| r.random()) }).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.shuffle(&mut r);
        let a = batched_scores(&set, &zs, &params, 0.7, UpsampleMode::Bilinear).unwrap();
        let pset: Vec<_> = order.iter().map(|&i| set[i].clone()).collect();
        let pzs: Vec<_> = order.iter().map(|&i| zs[i].clone()).collect();
        let b = batched_scores(&pset, &pzs, &params, 0.7, UpsampleMode::Bilinear).unwrap();
        for (j, &i) in order.iter().enumerate() {
            prop_assert!(max_abs(&(&a[i].scores - &b[j].scores)) < 1e-12);
        }
    }

    #[test]
    fn text_state_ignores_prompt_order(seed in any::<u64>()) {
        let backend = MockBackend::new(MockConfig::uniform(seed, 1, 2, 4, 8)).unwrap();
        let mut prompts: Vec<String> = (0..6).map(|i| format!("a photo of thing {i}")).collect();
        let a = encode_text_state(&backend, &PromptSet { state_id: "x".into(), product: String::new(), prompts: prompts.clone() }).unwrap();
        prompts.shuffle(&mut rng(seed));
        let b = encode_text_state(&backend, &PromptSet { state_id: "x".into(), product: String::new(), prompts }).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn binary_mask_is_union_of_defect_masks(seed in any::<u64>(), n in 1usize..4) {
        let mut r = rng(seed);
        let roster: Vec<String> = ["normal", "a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let masks: Vec<(String, Array2<bool>)> = (0..n)
            .map(|i| (roster[1 + i].clone(), Array2::from_shape_fn((8, 8), |_| r.random_bool(0.2))))
            .collect();
        let multi = build_multi_defect_map(&masks, &roster, (8, 8)).unwrap();
        for ((y, x), l) in multi.indexed_iter() {
            prop_assert_eq!(*l != 0, masks.iter().any(|(_, m)| m[[y, x]]));
        }
    }
}

fn max_abs<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn mock_encoding_is_pure() {
    let backend = MockBackend::new(MockConfig::uniform(4, 2, 4, 6, 8)).unwrap();
    let img = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
        ((y * 7 + x * 3 + c) % 11) as f32 / 11.0
    });
    let input = ImageInput {
        key_path: "k",
        pixels: Some(&img),
    };
    let a = backend.encode_image(&input).unwrap();
    let b = backend.encode_image(&input).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bundled_rosters_are_ordered_and_deterministic() {
    for name in bundled::NAMES {
        let kba = bundled::load(name).unwrap();
        for product in kba.products.keys() {
            let full = build_state_roster(&kba, product, false).unwrap();
            let filtered = build_state_roster(&kba, product, true).unwrap();
            assert_eq!(full[0], "normal");
            assert_eq!(filtered[0], "normal");
            let positions: Vec<usize> = filtered
                .iter()
                .map(|s| full.iter().position(|f| f == s).unwrap())
                .collect();
            assert!(
                positions.windows(2).all(|w| w[0] < w[1]),
                "{name}/{product}"
            );
            assert_eq!(
                build_all(&kba, product, true).unwrap(),
                build_all(&kba, product, true).unwrap()
            );
        }
        for id in kba.defect_ids() {
            assert_eq!(kba.resolve_superclass(id).unwrap(), id);
        }
    }
}

#[test]
fn identity_adapter_round_trip_through_project() {
    let params = AdapterParams {
        stages: vec![StageAdapter {
            weight: Array2::eye(3),
            bias: Array1::zeros(3),
        }],
        tau: 0.07,
    };
    let grid = Array3::from_shape_vec((1, 1, 3), vec![0.6f32, 0.8, 0.0]).unwrap();
    let z = project(&params, grid.view(), 0).unwrap();
    assert!((z[[0, 0, 0]] - 0.6).abs() < 1e-7 && (z[[0, 0, 1]] - 0.8).abs() < 1e-7);
}
