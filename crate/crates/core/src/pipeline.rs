//! End-to-end runs driven by a [`RunConfig`]: training, inference with
//! artifact emission, and evaluation against a ground-truth tree.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::config::RunConfig;
use crate::dataio::{
    load_ground_truth, load_image, scan_dataset, scan_product, SampleDescriptor, Split,
};
use crate::encoder::{ImageEmbeddings, ImageEncoder, ImageInput, StateTextEmbeddings};
use crate::error::{Error, Result};
use crate::fewshot::{batched_scores, build_bank, final_map, reference_map};
use crate::infer::emit::{
    read_f32_map, read_f32_stack, read_label_png, write_artifacts, ArtifactPaths,
};
use crate::infer::{image_decision, infer_embeddings, text_for_mode, Inference};
use crate::kba::Kba;
use crate::metrics::{average_reports, evaluate_product, EvalRecord, EvalReport};
use crate::prompts::build_state_roster;
use crate::train::{train_adapters, DiskTrainingSet, ProductTexts, TrainLog};

/// `/`-joined path relative to the first root containing it, else as given.
pub fn key_path(path: &Path, roots: &[&Path]) -> String {
    let rel = roots
        .iter()
        .find_map(|r| path.strip_prefix(r).ok())
        .unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` must be set for this command")))
}

fn products_of(cfg: &RunConfig, descriptors: &[SampleDescriptor]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for d in descriptors {
        if !out.contains(&d.product) {
            out.push(d.product.clone());
        }
    }
    match &cfg.product {
        Some(p) => out.into_iter().filter(|x| x == p).collect(),
        None => out,
    }
}

fn scan(cfg: &RunConfig, root: &Path, kba: &Kba) -> Result<Vec<SampleDescriptor>> {
    match &cfg.product {
        Some(p) => scan_product(root, p, kba),
        None => scan_dataset(root, kba),
    }
}

/// Trains on every image (both splits) under `train_root`.
pub fn run_train(cfg: &RunConfig) -> Result<(AdapterParams, TrainLog)> {
    let root = required(&cfg.train_root, "train_root")?;
    let kba = cfg.load_kba()?;
    let encoder = cfg.image_encoder()?;
    let descriptors = scan(cfg, root, &kba)?;
    if descriptors.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let products = products_of(cfg, &descriptors);
    let mut texts = ProductTexts::new();
    for p in &products {
        texts.insert(p.clone(), cfg.text_states(&kba, p)?);
    }
    let roster = build_state_roster(&kba, &products[0], false)?;
    let set = DiskTrainingSet {
        descriptors,
        roster,
        size: cfg.image_size,
        normalization: cfg.normalization,
        with_pixels: encoder.needs_pixels(),
    };
    train_adapters(&set, encoder.as_ref(), &texts, &cfg.train_config())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    #[default]
    ZeroShot,
    FewShot,
    Batched,
}

/// One row of `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub key: String,
    pub image: PathBuf,
    pub product: String,
    pub height: usize,
    pub width: usize,
    pub state_ids: Vec<String>,
    pub score: f64,
    pub a_x: f64,
    pub is_anomalous: bool,
    pub artifacts: ArtifactPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsIndex {
    pub scoring: ScoringMode,
    pub theta: f64,
    pub results: Vec<ResultEntry>,
}

/// An image to score, with the product whose prompts apply.
#[derive(Debug, Clone)]
pub struct InferInput {
    pub path: PathBuf,
    pub product: String,
}

struct Encoded {
    input: InferInput,
    key: String,
    emb: ImageEmbeddings,
}

fn encode_all(
    cfg: &RunConfig,
    encoder: &dyn ImageEncoder,
    inputs: &[InferInput],
) -> Result<Vec<Encoded>> {
    let roots: Vec<&Path> = cfg
        .test_root
        .iter()
        .chain(cfg.train_root.iter())
        .map(PathBuf::as_path)
        .collect();
    inputs
        .par_iter()
        .map(|input| {
            let key = key_path(&input.path, &roots);
            let pixels = if encoder.needs_pixels() {
                Some(load_image(&input.path, cfg.image_size, &cfg.normalization)?)
            } else {
                None
            };
            let emb = encoder.encode_image(&ImageInput {
                key_path: &key,
                pixels: pixels.as_ref(),
            })?;
            emb.validate()?;
            Ok(Encoded {
                input: input.clone(),
                key,
                emb,
            })
        })
        .collect()
}

/// One scored image; few-shot and batched modes replace the anomaly map
/// and decision.
#[derive(Debug, Clone)]
pub struct Scored {
    pub key: String,
    pub input: InferInput,
    pub inference: Inference,
}

/// Scores `inputs`; few-shot references apply to every product given.
pub fn score_images(
    cfg: &RunConfig,
    params: &AdapterParams,
    inputs: &[InferInput],
    scoring: ScoringMode,
    references: &[InferInput],
) -> Result<Vec<Scored>> {
    let kba = cfg.load_kba()?;
    let encoder = cfg.image_encoder()?;
    let opts = cfg.infer_options();
    let mut texts: HashMap<String, StateTextEmbeddings> = HashMap::new();
    for input in inputs {
        if !texts.contains_key(&input.product) {
            let full = cfg.text_states(&kba, &input.product)?;
            texts.insert(
                input.product.clone(),
                text_for_mode(&full, &kba, &input.product, cfg.mode)?,
            );
        }
    }
    let encoded = encode_all(cfg, encoder.as_ref(), inputs)?;
    let mut scored = encoded
        .par_iter()
        .map(|e| {
            let inference = infer_embeddings(&e.emb, params, &texts[&e.input.product], &opts)?;
            Ok(Scored {
                key: e.key.clone(),
                input: e.input.clone(),
                inference,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match scoring {
        ScoringMode::ZeroShot => {}
        ScoringMode::FewShot => {
            if references.is_empty() {
                return Err(Error::EmptyReferences);
            }
            let refs = encode_all(cfg, encoder.as_ref(), references)?;
            let mut banks = HashMap::new();
            for product in texts.keys() {
                let embs: Vec<ImageEmbeddings> = refs
                    .iter()
                    .filter(|r| &r.input.product == product)
                    .map(|r| r.emb.clone())
                    .collect();
                banks.insert(product.clone(), build_bank(&embs, params)?);
            }
            let finals = encoded
                .par_iter()
                .zip(&scored)
                .map(|(e, s)| {
                    let r = reference_map(
                        &e.emb,
                        &banks[&e.input.product],
                        params,
                        opts.height,
                        opts.width,
                        opts.upsample,
                    )?;
                    final_map(&s.inference.anomaly, &r)
                })
                .collect::<Result<Vec<_>>>()?;
            for (s, f) in scored.iter_mut().zip(finals) {
                s.inference.decision = image_decision(&f, s.inference.a_x, opts.theta);
                s.inference.anomaly = f;
            }
        }
        ScoringMode::Batched => {
            for product in texts.keys() {
                let idx: Vec<usize> = (0..encoded.len())
                    .filter(|&i| &encoded[i].input.product == product)
                    .collect();
                let embs: Vec<ImageEmbeddings> =
                    idx.iter().map(|&i| encoded[i].emb.clone()).collect();
                let zs: Vec<_> = idx
                    .iter()
                    .map(|&i| scored[i].inference.anomaly.clone())
                    .collect();
                let finals = batched_scores(&embs, &zs, params, cfg.alpha_quantile, opts.upsample)?;
                for (&i, f) in idx.iter().zip(finals) {
                    let s = &mut scored[i];
                    s.inference.decision = image_decision(&f, s.inference.a_x, opts.theta);
                    s.inference.anomaly = f;
                }
            }
        }
    }
    Ok(scored)
}

fn artifact_stem(key: &str) -> String {
    let stem = key.rsplit_once('.').map_or(key, |(s, _)| s);
    stem.replace(['/', '\\'], "__")
}

/// Scores `inputs` and writes artifacts plus `results.json` into `cfg.output`.
pub fn run_infer(
    cfg: &RunConfig,
    params: &AdapterParams,
    inputs: &[InferInput],
    scoring: ScoringMode,
    references: &[InferInput],
) -> Result<ResultsIndex> {
    let scored = score_images(cfg, params, inputs, scoring, references)?;
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let results = scored
        .par_iter()
        .map(|s| {
            let inf = &s.inference;
            let artifacts = write_artifacts(
                &cfg.output,
                &artifact_stem(&s.key),
                &inf.anomaly,
                &inf.multi_defect,
                &inf.labels(),
            )?;
            Ok(ResultEntry {
                key: s.key.clone(),
                image: s.input.path.clone(),
                product: s.input.product.clone(),
                height: inf.multi_defect.height(),
                width: inf.multi_defect.width(),
                state_ids: inf.multi_defect.state_ids.clone(),
                score: inf.decision.score,
                a_x: inf.a_x,
                is_anomalous: inf.decision.is_anomalous,
                artifacts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = ResultsIndex {
        scoring,
        theta: cfg.theta,
        results,
    };
    let path = cfg.output.join("results.json");
    let json = serde_json::to_vec_pretty(&index).expect("results serialize");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Test-split images of `test_root`, in scan order.
pub fn test_inputs(cfg: &RunConfig) -> Result<Vec<InferInput>> {
    let root = required(&cfg.test_root, "test_root")?;
    let kba = cfg.load_kba()?;
    Ok(scan(cfg, root, &kba)?
        .into_iter()
        .filter(|d| d.split == Split::Test)
        .map(|d| InferInput {
            path: d.image_path,
            product: d.product,
        })
        .collect())
}

/// The first `k` good training images of each product under `test_root`.
pub fn reference_inputs(cfg: &RunConfig, k: usize) -> Result<Vec<InferInput>> {
    let root = required(&cfg.test_root, "test_root")?;
    let kba = cfg.load_kba()?;
    let mut taken: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for d in scan(cfg, root, &kba)? {
        if d.split == Split::Train && d.is_normal() {
            let n = taken.entry(d.product.clone()).or_default();
            if *n < k {
                *n += 1;
                out.push(InferInput {
                    path: d.image_path,
                    product: d.product,
                });
            }
        }
    }
    Ok(out)
}

fn report_from_records(
    per_product: IndexMap<String, (Vec<EvalRecord>, usize)>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (product, (records, k)) in per_product {
        report.binary_only_images += records
            .iter()
            .filter(|r| r.is_anomalous() && r.gt_multi.is_none())
            .count();
        report
            .products
            .insert(product, evaluate_product(&records, k)?);
    }
    report.average = average_reports(report.products.values());
    Ok(report)
}

/// Evaluates a `results.json` produced by [`run_infer`] against `test_root`.
pub fn evaluate_results(cfg: &RunConfig, results: &ResultsIndex) -> Result<EvalReport> {
    let root = required(&cfg.test_root, "test_root")?;
    let kba = cfg.load_kba()?;
    let descriptors: HashMap<String, SampleDescriptor> = scan(cfg, root, &kba)?
        .into_iter()
        .filter(|d| d.split == Split::Test)
        .map(|d| (d.rel_path.clone(), d))
        .collect();
    let mut per_product: IndexMap<String, (Vec<EvalRecord>, usize)> = IndexMap::new();
    for r in &results.results {
        let d = descriptors.get(&r.key).ok_or_else(|| Error::Layout {
            path: root.join(&r.key),
            reason: "result has no matching test image".into(),
        })?;
        if r.height != r.width {
            return Err(Error::ShapeMismatch(format!(
                "non-square result map for {}",
                r.key
            )));
        }
        let gt = load_ground_truth(d, &r.state_ids, r.height)?;
        let probs = read_f32_stack(&r.artifacts.mdm_f32, r.state_ids.len(), r.height, r.width)?;
        let labels = read_label_png(&r.artifacts.labels_png)?;
        let record = EvalRecord {
            anomaly: read_f32_map(&r.artifacts.heatmap_f32, r.height, r.width)?,
            image_score: r.score,
            gt_mask: gt.binary,
            multi_defect: Some((probs, labels)),
            gt_multi: gt.multi,
        };
        let entry = per_product
            .entry(r.product.clone())
            .or_insert_with(|| (Vec::new(), r.state_ids.len() - 1));
        entry.0.push(record);
    }
    if per_product.is_empty() {
        return Err(Error::EmptyDataset);
    }
    report_from_records(per_product)
}

/// Scores the test split in memory and evaluates it without writing artifacts.
pub fn evaluate_dataset(
    cfg: &RunConfig,
    params: &AdapterParams,
    scoring: ScoringMode,
    references: &[InferInput],
) -> Result<EvalReport> {
    let root = required(&cfg.test_root, "test_root")?;
    let kba = cfg.load_kba()?;
    let descriptors: HashMap<PathBuf, SampleDescriptor> = scan(cfg, root, &kba)?
        .into_iter()
        .filter(|d| d.split == Split::Test)
        .map(|d| (d.image_path.clone(), d))
        .collect();
    let inputs = test_inputs(cfg)?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scored = score_images(cfg, params, &inputs, scoring, references)?;
    let records = scored
        .into_par_iter()
        .map(|s| {
            let d = &descriptors[&s.input.path];
            let inf = s.inference;
            let gt = load_ground_truth(d, &inf.multi_defect.state_ids, cfg.image_size)?;
            let labels = crate::infer::classify_pixels(&inf.multi_defect);
            let k = inf.multi_defect.state_ids.len() - 1;
            Ok((
                s.input.product,
                k,
                EvalRecord {
                    anomaly: inf.anomaly.scores,
                    image_score: inf.decision.score,
                    gt_mask: gt.binary,
                    multi_defect: Some((inf.multi_defect.probs, labels)),
                    gt_multi: gt.multi,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_product: IndexMap<String, (Vec<EvalRecord>, usize)> = IndexMap::new();
    for (product, k, rec) in records {
        per_product
            .entry(product)
            .or_insert_with(|| (Vec::new(), k))
            .0
            .push(rec);
    }
    report_from_records(per_product)
}
