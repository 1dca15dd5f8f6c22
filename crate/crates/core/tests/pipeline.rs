use std::path::Path;

use multiads::config::{BackendConfig, RunConfig};
use multiads::dataio::load_ground_truth;
use multiads::dataio::{scan_dataset, Split};
use multiads::infer::emit::write_artifacts;
use multiads::infer::{classify_pixels, AnomalyMap, MultiDefectMap};
use multiads::pipeline::{
    evaluate_dataset, evaluate_results, reference_inputs, run_infer, run_train, test_inputs,
    ResultEntry, ResultsIndex, ScoringMode,
};
use multiads::synthetic::{self, FixtureConfig};
use ndarray::Array3;

fn fixture(dir: &Path) -> RunConfig {
    let data = dir.join("data");
    synthetic::write_tree(
        &data,
        &FixtureConfig {
            n_train: 12,
            n_test: 9,
            ..FixtureConfig::default()
        },
    )
    .unwrap();
    let kba_path = dir.join("plate.json");
    synthetic::fixture_kba().unwrap().save(&kba_path).unwrap();
    RunConfig {
        backend: BackendConfig::Mock(synthetic::mock_config(5)),
        kba: kba_path.to_string_lossy().into_owned(),
        train_root: Some(data.clone()),
        test_root: Some(data),
        image_size: 64,
        m: 2,
        lr: 0.01,
        batch_size: 4,
        epochs: 2,
        checkpoint: dir.join("adapters.madsadp"),
        output: dir.join("out"),
        ..RunConfig::default()
    }
}

#[test]
fn scan_matches_the_written_tree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let kba = cfg.load_kba().unwrap();
    let found = scan_dataset(cfg.train_root.as_ref().unwrap(), &kba).unwrap();
    assert_eq!(found.iter().filter(|d| d.split == Split::Train).count(), 12);
    assert_eq!(found.iter().filter(|d| d.split == Split::Test).count(), 9);
    assert_eq!(found.iter().filter(|d| d.is_normal()).count(), 4 + 3);
    for d in found.iter().filter(|d| !d.is_normal()) {
        let gt =
            load_ground_truth(d, &["normal".into(), "scratch".into(), "spot".into()], 64).unwrap();
        let multi = gt.multi.unwrap();
        assert!(multi
            .iter()
            .zip(gt.binary.iter())
            .all(|(l, b)| (*l != 0) == *b));
    }
}

#[test]
fn train_infer_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let (params, log) = run_train(&cfg).unwrap();
    assert_eq!(log.samples_used, 21);

    let inputs = test_inputs(&cfg).unwrap();
    let index = run_infer(&cfg, &params, &inputs, ScoringMode::ZeroShot, &[]).unwrap();
    assert_eq!(index.results.len(), 9);
    for r in &index.results {
        assert!(r.artifacts.heatmap_png.exists() && r.artifacts.mdm_f32.exists());
        assert!((0.0..=1.0).contains(&r.score));
    }
    assert!(cfg.output.join("results.json").exists());

    let from_files = evaluate_results(&cfg, &index).unwrap();
    let in_memory = evaluate_dataset(&cfg, &params, ScoringMode::ZeroShot, &[]).unwrap();
    let a = from_files.average.pixel.auroc.unwrap();
    let b = in_memory.average.pixel.auroc.unwrap();
    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    assert_eq!(
        from_files.average.image.auroc,
        in_memory.average.image.auroc
    );
}

#[test]
fn fewshot_and_batched_change_the_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let (params, _) = run_train(&cfg).unwrap();
    let inputs = test_inputs(&cfg).unwrap();
    let zero = multiads::pipeline::score_images(&cfg, &params, &inputs, ScoringMode::ZeroShot, &[])
        .unwrap();
    let refs = reference_inputs(&cfg, 1).unwrap();
    assert_eq!(refs.len(), 1);
    let few = multiads::pipeline::score_images(&cfg, &params, &inputs, ScoringMode::FewShot, &refs)
        .unwrap();
    let batched =
        multiads::pipeline::score_images(&cfg, &params, &inputs, ScoringMode::Batched, &[])
            .unwrap();
    for ((z, f), b) in zero.iter().zip(&few).zip(&batched) {
        assert_ne!(z.inference.anomaly.scores, f.inference.anomaly.scores);
        assert_ne!(z.inference.anomaly.scores, b.inference.anomaly.scores);
        assert_eq!(
            z.inference.multi_defect.probs,
            f.inference.multi_defect.probs
        );
    }
    let err = multiads::pipeline::score_images(&cfg, &params, &inputs, ScoringMode::FewShot, &[])
        .unwrap_err();
    assert_eq!(err.kind(), multiads::ErrorKind::Data);
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let kba = cfg.load_kba().unwrap();
    let roster: Vec<String> = ["normal", "scratch", "spot"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let out = dir.path().join("perfect");
    std::fs::create_dir_all(&out).unwrap();
    let mut results = Vec::new();
    for d in scan_dataset(cfg.test_root.as_ref().unwrap(), &kba)
        .unwrap()
        .into_iter()
        .filter(|d| d.split == Split::Test)
    {
        let gt = load_ground_truth(&d, &roster, 64).unwrap();
        let multi = gt.multi.unwrap();
        let probs = Array3::from_shape_fn((3, 64, 64), |(k, y, x)| {
            f64::from(u8::from(multi[[y, x]] as usize == k))
        });
        let mdm = MultiDefectMap::new(probs, roster.clone()).unwrap();
        let anomaly = AnomalyMap {
            scores: gt.binary.mapv(|b| f64::from(u8::from(b))),
        };
        let stem = d.rel_path.replace('/', "__");
        let artifacts =
            write_artifacts(&out, &stem, &anomaly, &mdm, &classify_pixels(&mdm)).unwrap();
        results.push(ResultEntry {
            key: d.rel_path.clone(),
            image: d.image_path.clone(),
            product: d.product.clone(),
            height: 64,
            width: 64,
            state_ids: roster.clone(),
            score: anomaly.max(),
            a_x: anomaly.max(),
            is_anomalous: anomaly.max() > 0.5,
            artifacts,
        });
    }
    let report = evaluate_results(
        &cfg,
        &ResultsIndex {
            scoring: ScoringMode::ZeroShot,
            theta: 0.5,
            results,
        },
    )
    .unwrap();
    let avg = report.average;
    for v in [
        avg.pixel.auroc,
        avg.pixel.f1max,
        avg.pixel.ap,
        avg.image.auroc,
        avg.image.f1max,
        avg.image.ap,
        avg.mtas.auroc,
        avg.mtas.f1,
        avg.mtas.ap,
    ] {
        assert_eq!(v, Some(1.0));
    }
    assert!(avg.pixel.aupro.unwrap() > 0.999);
}
