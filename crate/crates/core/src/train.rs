//! Adapter training on a labelled source dataset. The backbone and the text
//! embeddings stay fixed; only the per-stage adapters are updated.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, StageAdapter, DEFAULT_TAU};
use crate::dataio::{load_sample, Normalization, Sample, SampleDescriptor};
use crate::encoder::{ImageEncoder, ImageInput, StateTextEmbeddings};
use crate::error::{Error, Result};
use crate::infer::UpsampleMode;
use crate::loss::{image_loss, GroundTruth, LossConfig, LossOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub stage_count: usize,
    pub exclude_combined: bool,
    pub tau: f64,
    pub loss: LossConfig,
    pub upsample: UpsampleMode,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Sum batch gradients in sample order rather than by parallel reduction.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 5,
            optimizer: Optimizer::Adam,
            seed: 0,
            stage_count: 4,
            exclude_combined: true,
            tau: DEFAULT_TAU,
            loss: LossConfig::default(),
            upsample: UpsampleMode::Bilinear,
            max_steps: None,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.stage_count == 0 {
            return Err(Error::Config("stage count must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        self.loss.validate()
    }
}

/// Indexed source of labelled samples.
pub trait TrainingSet: Sync {
    fn len(&self) -> usize;
    fn descriptor(&self, i: usize) -> &SampleDescriptor;
    fn load(&self, i: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainingSet for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn descriptor(&self, i: usize) -> &SampleDescriptor {
        &self[i].descriptor
    }

    fn load(&self, i: usize) -> Result<Sample> {
        Ok(self[i].clone())
    }
}

/// Samples decoded from disk on demand.
pub struct DiskTrainingSet {
    pub descriptors: Vec<SampleDescriptor>,
    pub roster: Vec<String>,
    pub size: usize,
    pub normalization: Normalization,
    pub with_pixels: bool,
}

impl TrainingSet for DiskTrainingSet {
    fn len(&self) -> usize {
        self.descriptors.len()
    }

    fn descriptor(&self, i: usize) -> &SampleDescriptor {
        &self.descriptors[i]
    }

    fn load(&self, i: usize) -> Result<Sample> {
        load_sample(
            &self.descriptors[i],
            &self.roster,
            self.size,
            &self.normalization,
            self.with_pixels,
        )
    }
}

/// Text states per product; all share one roster.
pub type ProductTexts = HashMap<String, StateTextEmbeddings>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Mean step loss of each epoch.
    pub epoch_means: Vec<f64>,
    pub samples_used: usize,
    pub samples_skipped: usize,
}

struct Moments {
    m: Vec<StageAdapter>,
    v: Vec<StageAdapter>,
    t: i32,
}

fn zeros_like(params: &AdapterParams) -> Vec<StageAdapter> {
    params
        .stages
        .iter()
        .map(|s| StageAdapter {
            weight: Array2::zeros(s.weight.raw_dim()),
            bias: Array1::zeros(s.bias.raw_dim()),
        })
        .collect()
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, c1: f64, c2: f64) {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
}

fn apply_update(
    params: &mut AdapterParams,
    grads: &[StageAdapter],
    cfg: &TrainConfig,
    moments: &mut Moments,
) {
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.stages.iter_mut().zip(grads) {
                p.weight.scaled_add(-lr, &g.weight);
                p.bias.scaled_add(-lr, &g.bias);
            }
        }
        Optimizer::Adam => {
            moments.t += 1;
            let c1 = 1.0 - BETA1.powi(moments.t);
            let c2 = 1.0 - BETA2.powi(moments.t);
            for (((p, g), m), v) in params
                .stages
                .iter_mut()
                .zip(grads)
                .zip(&mut moments.m)
                .zip(&mut moments.v)
            {
                ndarray::Zip::from(&mut p.weight)
                    .and(&g.weight)
                    .and(&mut m.weight)
                    .and(&mut v.weight)
                    .for_each(|p, &g, m, v| adam_update(p, g, m, v, lr, c1, c2));
                ndarray::Zip::from(&mut p.bias)
                    .and(&g.bias)
                    .and(&mut m.bias)
                    .and(&mut v.bias)
                    .for_each(|p, &g, m, v| adam_update(p, g, m, v, lr, c1, c2));
            }
        }
    }
}

fn sample_loss<S: TrainingSet + ?Sized>(
    set: &S,
    i: usize,
    encoder: &dyn ImageEncoder,
    texts: &ProductTexts,
    params: &AdapterParams,
    cfg: &TrainConfig,
) -> Result<LossOutput> {
    let sample = set.load(i)?;
    let d = &sample.descriptor;
    let text = texts
        .get(&d.product)
        .ok_or_else(|| Error::UnknownProduct(d.product.clone()))?;
    let emb = encoder.encode_image(&ImageInput {
        key_path: &d.rel_path,
        pixels: sample.image.as_ref(),
    })?;
    emb.validate()?;
    let multi = sample
        .gt
        .multi
        .as_ref()
        .expect("binary-only samples are filtered out");
    image_loss(
        params,
        &emb,
        text,
        GroundTruth {
            multi: multi.view(),
            binary: sample.gt.binary.view(),
        },
        &cfg.loss,
        cfg.upsample,
    )
}

/// Trains freshly initialized adapters.
pub fn train_adapters<S: TrainingSet + ?Sized>(
    set: &S,
    encoder: &dyn ImageEncoder,
    texts: &ProductTexts,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, TrainLog)> {
    cfg.validate()?;
    let shapes = encoder.stage_shapes();
    if shapes.len() != cfg.stage_count {
        return Err(Error::DimensionMismatch(format!(
            "backend has {} stages, config asks for {}",
            shapes.len(),
            cfg.stage_count
        )));
    }
    let params = AdapterParams::init(&shapes, encoder.embed_dim(), cfg.tau, cfg.seed)?;
    continue_training(params, set, encoder, texts, cfg)
}

/// Trains from given starting parameters.
pub fn continue_training<S: TrainingSet + ?Sized>(
    mut params: AdapterParams,
    set: &S,
    encoder: &dyn ImageEncoder,
    texts: &ProductTexts,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, TrainLog)> {
    cfg.validate()?;
    let mut roster: Option<&[String]> = None;
    for t in texts.values() {
        if t.embed_dim() != params.embed_dim() {
            return Err(Error::DimensionMismatch(format!(
                "text width {} vs adapter width {}",
                t.embed_dim(),
                params.embed_dim()
            )));
        }
        match roster {
            None => roster = Some(t.state_ids()),
            Some(r) if r != t.state_ids() => {
                return Err(Error::Validation(
                    "products disagree on the training roster".into(),
                ));
            }
            _ => {}
        }
    }
    let mut log = TrainLog::default();
    let mut indices = Vec::new();
    for i in 0..set.len() {
        let d = set.descriptor(i);
        let skip = (cfg.exclude_combined && d.combined) || d.is_binary_only();
        if skip {
            log.samples_skipped += 1;
        } else {
            indices.push(i);
        }
    }
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    log.samples_used = indices.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut moments = Moments {
        m: zeros_like(&params),
        v: zeros_like(&params),
        t: 0,
    };
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for batch in indices.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|max| step >= max) {
                break 'epochs;
            }
            let scale = 1.0 / batch.len() as f64;
            let outputs: Vec<LossOutput> = batch
                .par_iter()
                .map(|&i| sample_loss(set, i, encoder, texts, &params, cfg))
                .collect::<Result<_>>()?;
            let total = if cfg.deterministic {
                let mut acc = LossOutput::zeros_like(&params);
                for o in &outputs {
                    acc.add_scaled(o, scale);
                }
                acc
            } else {
                outputs
                    .par_iter()
                    .fold(
                        || LossOutput::zeros_like(&params),
                        |mut acc, o| {
                            acc.add_scaled(o, scale);
                            acc
                        },
                    )
                    .reduce(
                        || LossOutput::zeros_like(&params),
                        |mut a, b| {
                            a.add_scaled(&b, 1.0);
                            a
                        },
                    )
            };
            if !total.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            apply_update(&mut params, &total.grads, cfg, &mut moments);
            params.validate()?;
            log.steps.push(StepRecord {
                epoch,
                step,
                loss: total.loss,
            });
            epoch_losses.push(total.loss);
            step += 1;
        }
        if !epoch_losses.is_empty() {
            log.epoch_means
                .push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
        }
    }
    Ok((params, log))
}
