use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use multiads::adapter::AdapterParams;
use multiads::config::RunConfig;
use multiads::dataio::{scan_dataset, scan_product};
use multiads::kba::{bundled, Kba};
use multiads::pipeline::{
    evaluate_dataset, evaluate_results, key_path, reference_inputs, run_infer, run_train,
    test_inputs, InferInput, ResultsIndex, ScoringMode,
};
use multiads::prompts::build_all;
use multiads::{Error, Result};
use serde::Serialize;

pub struct Global {
    pub deterministic: bool,
    pub seed: Option<u64>,
}

pub enum Scoring {
    ZeroShot,
    FewShot(usize),
    References(Vec<PathBuf>),
    Batched,
}

pub struct InferRequest<'a> {
    pub config: &'a Path,
    pub inputs: &'a [PathBuf],
    pub checkpoint: Option<&'a Path>,
    pub product: Option<&'a str>,
    pub output: Option<&'a Path>,
    pub scoring: Scoring,
}

fn load_config(g: &Global, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= g.deterministic;
    Ok(cfg)
}

fn load_kba(name: &str) -> Result<Kba> {
    if bundled::source(name).is_some() {
        bundled::load(name)
    } else {
        Kba::load(name)
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_json(value) + "\n").map_err(|e| Error::io(path, e))
}

pub fn kba_validate(name: &str) -> Result<()> {
    let kba = load_kba(name)?;
    println!(
        "{name}: ok ({} products, {} defect types, {} templates)",
        kba.products.len(),
        kba.defect_types.len(),
        kba.templates.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct PromptEntry {
    state_id: String,
    prompts: Vec<String>,
}

fn prompt_entries(kba: &Kba, product: &str, filtered: bool) -> Result<Vec<PromptEntry>> {
    Ok(build_all(kba, product, filtered)?
        .into_iter()
        .map(|s| PromptEntry {
            state_id: s.state_id,
            prompts: s.prompts,
        })
        .collect())
}

pub fn prompts_gen(kba: &str, product: &str, filtered: bool) -> Result<()> {
    let kba = load_kba(kba)?;
    println!("{}", to_json(&prompt_entries(&kba, product, filtered)?));
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    image_size: usize,
    stages: usize,
    /// Full-roster prompt sets per product.
    prompts: IndexMap<String, Vec<PromptEntry>>,
    /// Image keys (paths relative to the dataset root) per root.
    images: IndexMap<String, Vec<String>>,
}

pub fn export_manifest(g: &Global, config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(g, config)?;
    let kba = cfg.load_kba()?;
    let mut images = IndexMap::new();
    let mut products: Vec<String> = Vec::new();
    for (name, root) in [
        ("train_root", &cfg.train_root),
        ("test_root", &cfg.test_root),
    ] {
        let Some(root) = root else { continue };
        let found = match &cfg.product {
            Some(p) => scan_product(root, p, &kba)?,
            None => scan_dataset(root, &kba)?,
        };
        for d in &found {
            if !products.contains(&d.product) {
                products.push(d.product.clone());
            }
        }
        images.insert(
            name.to_string(),
            found.into_iter().map(|d| d.rel_path).collect(),
        );
    }
    if images.is_empty() {
        return Err(Error::Config(
            "set train_root and/or test_root to export a manifest".into(),
        ));
    }
    let mut prompts = IndexMap::new();
    for p in products {
        let entries = prompt_entries(&kba, &p, false)?;
        prompts.insert(p, entries);
    }
    let manifest = Manifest {
        image_size: cfg.image_size,
        stages: cfg.m,
        prompts,
        images,
    };
    match out {
        Some(path) => write_json(path, &manifest),
        None => {
            println!("{}", to_json(&manifest));
            Ok(())
        }
    }
}

fn log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".log.json");
    checkpoint.with_file_name(name)
}

pub fn train(g: &Global, config: &Path) -> Result<()> {
    let cfg = load_config(g, config)?;
    let (params, log) = run_train(&cfg)?;
    if let Some(dir) = cfg
        .checkpoint
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
    {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    params.save(&cfg.checkpoint)?;
    write_json(&log_path(&cfg.checkpoint), &log)?;
    println!(
        "trained {} steps on {} images ({} skipped); epoch mean loss {:.6} -> {:.6}",
        log.steps.len(),
        log.samples_used,
        log.samples_skipped,
        log.epoch_means.first().copied().unwrap_or(f64::NAN),
        log.epoch_means.last().copied().unwrap_or(f64::NAN),
    );
    println!("checkpoint: {}", cfg.checkpoint.display());
    Ok(())
}

fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| {
        matches!(
            e.to_ascii_lowercase().as_str(),
            "png" | "jpg" | "jpeg" | "bmp"
        )
    })
}

/// Expands files and directories into scored inputs with their product.
fn expand_inputs(
    cfg: &RunConfig,
    kba: &Kba,
    paths: &[PathBuf],
    product: Option<&str>,
) -> Result<Vec<InferInput>> {
    let roots: Vec<&Path> = cfg
        .test_root
        .iter()
        .chain(cfg.train_root.iter())
        .map(PathBuf::as_path)
        .collect();
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            for entry in walkdir::WalkDir::new(p).sort_by_file_name() {
                let entry = entry.map_err(|e| Error::Layout {
                    path: p.clone(),
                    reason: e.to_string(),
                })?;
                let path = entry.path();
                let in_masks = path.components().any(|c| c.as_os_str() == "ground_truth");
                if entry.file_type().is_file() && is_image(path) && !in_masks {
                    files.push(path.to_path_buf());
                }
            }
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(Error::io(
                p,
                std::io::Error::from(std::io::ErrorKind::NotFound),
            ));
        }
    }
    files
        .into_iter()
        .map(|path| {
            let product = match product.or(cfg.product.as_deref()) {
                Some(p) => p.to_string(),
                None => {
                    let key = key_path(&path, &roots);
                    let first = key.split('/').next().unwrap_or_default().to_string();
                    if !kba.products.contains_key(&first) {
                        return Err(Error::Config(format!(
                            "cannot tell the product of {}; pass --product",
                            path.display()
                        )));
                    }
                    first
                }
            };
            Ok(InferInput { path, product })
        })
        .collect()
}

fn resolve_scoring(
    cfg: &RunConfig,
    kba: &Kba,
    scoring: Scoring,
    product: Option<&str>,
) -> Result<(ScoringMode, Vec<InferInput>)> {
    Ok(match scoring {
        Scoring::ZeroShot => (ScoringMode::ZeroShot, Vec::new()),
        Scoring::Batched => (ScoringMode::Batched, Vec::new()),
        Scoring::FewShot(k) => {
            if k == 0 {
                return Err(Error::Config(
                    "--fewshot needs at least one reference".into(),
                ));
            }
            (ScoringMode::FewShot, reference_inputs(cfg, k)?)
        }
        Scoring::References(paths) => (
            ScoringMode::FewShot,
            expand_inputs(cfg, kba, &paths, product)?,
        ),
    })
}

pub fn infer(g: &Global, req: InferRequest<'_>) -> Result<()> {
    let mut cfg = load_config(g, req.config)?;
    if let Some(o) = req.output {
        cfg.output = o.to_path_buf();
    }
    let kba = cfg.load_kba()?;
    let params = AdapterParams::load(req.checkpoint.unwrap_or(&cfg.checkpoint))?;
    let inputs = if req.inputs.is_empty() {
        test_inputs(&cfg)?
    } else {
        expand_inputs(&cfg, &kba, req.inputs, req.product)?
    };
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mode, refs) = resolve_scoring(&cfg, &kba, req.scoring, req.product)?;
    let index = run_infer(&cfg, &params, &inputs, mode, &refs)?;
    let anomalous = index.results.iter().filter(|r| r.is_anomalous).count();
    println!(
        "scored {} images ({anomalous} above theta {}); results: {}",
        index.results.len(),
        cfg.theta,
        cfg.output.join("results.json").display()
    );
    Ok(())
}

pub fn eval(
    g: &Global,
    config: &Path,
    results: Option<&Path>,
    checkpoint: Option<&Path>,
    scoring: Scoring,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(g, config)?;
    let report = match results {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let index: ResultsIndex = serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            evaluate_results(&cfg, &index)?
        }
        None => {
            let kba = cfg.load_kba()?;
            let params = AdapterParams::load(checkpoint.unwrap_or(&cfg.checkpoint))?;
            let (mode, refs) = resolve_scoring(&cfg, &kba, scoring, None)?;
            evaluate_dataset(&cfg, &params, mode, &refs)?
        }
    };
    let path = out.map_or_else(|| cfg.output.join("eval.json"), Path::to_path_buf);
    write_json(&path, &report)?;
    println!("{}", to_json(&report));
    Ok(())
}
