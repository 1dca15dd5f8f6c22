//! Run configuration shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::DEFAULT_TAU;
use crate::dataio::{Normalization, IMAGE_SIZE};
use crate::encoder::mock::{MockBackend, MockConfig};
use crate::encoder::precomputed::{load_text, PrecomputedImages};
use crate::encoder::{ImageEmbeddings, ImageEncoder, ImageInput, StageShape, StateTextEmbeddings};
use crate::error::{Error, Result};
use crate::fewshot::DEFAULT_ALPHA;
use crate::infer::{InferOptions, PromptMode, UpsampleMode, DEFAULT_THETA};
use crate::kba::{bundled, Kba};
use crate::loss::LossConfig;
use crate::train::{Optimizer, TrainConfig};

pub const SEED_ENV: &str = "MULTIADS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Mock(MockConfig),
    /// Exported embeddings. `text` is a `MADSTXT1` file, or a directory of
    /// `<product>.madstxt` files.
    Precomputed {
        images: PathBuf,
        text: PathBuf,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock(MockConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tau: f64,
    pub gamma: f64,
    pub dice_eps: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub m: usize,
    pub exclude_combined: bool,
    pub upsample: UpsampleMode,
    pub theta: f64,
    pub alpha_quantile: f64,
    pub max_steps: Option<usize>,
    pub downsample_gt: bool,
    /// L2-normalize patch embeddings before the adapter.
    pub pre_normalize: bool,
    /// Ordered gradient reduction; needed for bit-reproducible checkpoints.
    pub deterministic: bool,

    pub backend: BackendConfig,
    /// Bundled knowledge-base name or a JSON path.
    pub kba: String,
    pub train_root: Option<PathBuf>,
    pub test_root: Option<PathBuf>,
    /// Restrict to one product; all products when unset.
    pub product: Option<String>,
    pub mode: PromptMode,
    pub image_size: usize,
    pub normalization: Normalization,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let l = LossConfig::default();
        RunConfig {
            tau: DEFAULT_TAU,
            gamma: l.gamma,
            dice_eps: l.dice_eps,
            lr: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            optimizer: t.optimizer,
            seed: t.seed,
            m: t.stage_count,
            exclude_combined: t.exclude_combined,
            upsample: UpsampleMode::Bilinear,
            theta: DEFAULT_THETA,
            alpha_quantile: DEFAULT_ALPHA,
            max_steps: None,
            downsample_gt: false,
            pre_normalize: false,
            deterministic: t.deterministic,
            backend: BackendConfig::default(),
            kba: "mvtec".into(),
            train_root: None,
            test_root: None,
            product: None,
            mode: PromptMode::Full,
            image_size: IMAGE_SIZE,
            normalization: Normalization::default(),
            checkpoint: "adapters.madsadp".into(),
            output: "out".into(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses JSON; relative paths are resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [&mut cfg.checkpoint, &mut cfg.output]
            .into_iter()
            .chain(cfg.train_root.as_mut())
            .chain(cfg.test_root.as_mut())
        {
            resolve(base, p);
        }
        if let BackendConfig::Precomputed { images, text } = &mut cfg.backend {
            resolve(base, images);
            resolve(base, text);
        }
        if bundled::source(&cfg.kba).is_none() {
            let mut p = PathBuf::from(&cfg.kba);
            resolve(base, &mut p);
            cfg.kba = p.to_string_lossy().into_owned();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the `MULTIADS_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_json(&text, base)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!(
                "theta must lie in [0, 1], got {}",
                self.theta
            )));
        }
        if !(self.alpha_quantile > 0.0 && self.alpha_quantile < 1.0) {
            return Err(Error::Config(format!(
                "alpha_quantile must lie in (0, 1), got {}",
                self.alpha_quantile
            )));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if self.normalization.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            dice_eps: self.dice_eps,
            stage_weights: Vec::new(),
            downsample_gt: self.downsample_gt,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: self.optimizer,
            seed: self.seed,
            stage_count: self.m,
            exclude_combined: self.exclude_combined,
            tau: self.tau,
            loss: self.loss_config(),
            upsample: self.upsample,
            max_steps: self.max_steps,
            deterministic: self.deterministic,
        }
    }

    pub fn infer_options(&self) -> InferOptions {
        InferOptions {
            height: self.image_size,
            width: self.image_size,
            upsample: self.upsample,
            theta: self.theta,
        }
    }

    pub fn load_kba(&self) -> Result<Kba> {
        if bundled::source(&self.kba).is_some() {
            bundled::load(&self.kba)
        } else {
            Kba::load(&self.kba)
        }
    }

    pub fn image_encoder(&self) -> Result<Box<dyn ImageEncoder>> {
        let inner: Box<dyn ImageEncoder> = match &self.backend {
            BackendConfig::Mock(m) => Box::new(MockBackend::new(m.clone())?),
            BackendConfig::Precomputed { images, .. } => Box::new(PrecomputedImages::load(images)?),
        };
        Ok(if self.pre_normalize {
            Box::new(NormalizedPatches(inner))
        } else {
            inner
        })
    }

    /// Full-roster text states of `product`.
    pub fn text_states(&self, kba: &Kba, product: &str) -> Result<StateTextEmbeddings> {
        let roster = crate::prompts::build_state_roster(kba, product, false)?;
        match &self.backend {
            BackendConfig::Mock(m) => {
                StateTextEmbeddings::build(kba, product, false, &MockBackend::new(m.clone())?)
            }
            BackendConfig::Precomputed { text, .. } => {
                let path = if text.is_dir() {
                    text.join(format!("{product}.madstxt"))
                } else {
                    text.clone()
                };
                load_text(&path)?.select(&roster)
            }
        }
    }
}

/// Wraps an encoder and L2-normalizes every patch vector it returns.
/// All-zero patches are left as they are.
pub struct NormalizedPatches(pub Box<dyn ImageEncoder>);

impl ImageEncoder for NormalizedPatches {
    fn stage_shapes(&self) -> Vec<StageShape> {
        self.0.stage_shapes()
    }

    fn embed_dim(&self) -> usize {
        self.0.embed_dim()
    }

    fn encode_image(&self, input: &ImageInput<'_>) -> Result<ImageEmbeddings> {
        let mut emb = self.0.encode_image(input)?;
        for stage in &mut emb.stages {
            for mut lane in stage.lanes_mut(ndarray::Axis(2)) {
                let n = lane
                    .iter()
                    .map(|v| f64::from(*v) * f64::from(*v))
                    .sum::<f64>()
                    .sqrt();
                if n > 0.0 {
                    lane.mapv_inplace(|v| (f64::from(v) / n) as f32);
                }
            }
        }
        Ok(emb)
    }

    fn needs_pixels(&self) -> bool {
        self.0.needs_pixels()
    }
}
