//! Zero-shot inference: stage-averaged state maps, anomaly maps, image-level
//! decisions and per-pixel defect labels.

pub mod emit;
pub mod upsample;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::adapter::{global_score, AdapterParams, SimilarityMapStack};
use crate::encoder::{ImageEmbeddings, ImageEncoder, ImageInput, StateTextEmbeddings};
use crate::error::{Error, Result};
use crate::kba::Kba;
use crate::prompts::build_state_roster;
pub use upsample::{upsample, Resampler, UpsampleMode};

/// Per-pixel state index in `0..=K`.
pub type LabelMap = Array2<u8>;
/// Binary ground truth, `true` = anomalous.
pub type Mask = Array2<bool>;

pub const DEFAULT_THETA: f64 = 0.5;

/// Stage-averaged (K+1)×H×W state probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDefectMap {
    pub probs: Array3<f64>,
    pub state_ids: Vec<String>,
}

impl MultiDefectMap {
    pub fn new(probs: Array3<f64>, state_ids: Vec<String>) -> Result<Self> {
        if probs.dim().0 != state_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} channels for {} states",
                probs.dim().0,
                state_ids.len()
            )));
        }
        if state_ids.len() > 256 {
            return Err(Error::ShapeMismatch(
                "at most 256 states fit an 8-bit label map".into(),
            ));
        }
        Ok(MultiDefectMap { probs, state_ids })
    }

    pub fn height(&self) -> usize {
        self.probs.dim().1
    }

    pub fn width(&self) -> usize {
        self.probs.dim().2
    }
}

/// H×W anomaly scores in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub scores: Array2<f64>,
}

impl AnomalyMap {
    pub fn max(&self) -> f64 {
        self.scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub score: f64,
    pub is_anomalous: bool,
}

fn upsampled_stages(
    stack: &SimilarityMapStack,
    height: usize,
    width: usize,
    mode: UpsampleMode,
) -> Result<impl Iterator<Item = Result<Array3<f64>>> + '_> {
    if stack.maps.is_empty() {
        return Err(Error::EmptyStack);
    }
    Ok(stack
        .maps
        .iter()
        .map(move |m| upsample(m.view(), height, width, mode)))
}

/// Mean of the up-sampled stage maps.
pub fn multi_defect_map(
    stack: &SimilarityMapStack,
    height: usize,
    width: usize,
    mode: UpsampleMode,
) -> Result<MultiDefectMap> {
    let m = stack.maps.len() as f64;
    let mut acc: Option<Array3<f64>> = None;
    for up in upsampled_stages(stack, height, width, mode)? {
        let up = up?;
        match &mut acc {
            None => acc = Some(up),
            Some(a) => *a += &up,
        }
    }
    let mut probs = acc.expect("non-empty stack");
    probs /= m;
    MultiDefectMap::new(probs, stack.state_ids.clone())
}

/// Mean over stages of one minus the up-sampled normal channel.
pub fn anomaly_map(
    stack: &SimilarityMapStack,
    height: usize,
    width: usize,
    mode: UpsampleMode,
) -> Result<AnomalyMap> {
    let m = stack.maps.len() as f64;
    let mut acc = Array2::<f64>::zeros((height, width));
    for up in upsampled_stages(stack, height, width, mode)? {
        let up = up?;
        acc.zip_mut_with(&up.index_axis(Axis(0), 0), |a, p| *a += 1.0 - p);
    }
    acc /= m;
    Ok(AnomalyMap { scores: acc })
}

pub fn image_decision(anomaly: &AnomalyMap, a_x: f64, theta: f64) -> Decision {
    let score = (anomaly.max() + a_x) / 2.0;
    Decision {
        score,
        is_anomalous: score > theta,
    }
}

/// Per-pixel argmax; the lowest channel wins ties.
pub fn classify_pixels(mdm: &MultiDefectMap) -> LabelMap {
    let (c, h, w) = mdm.probs.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if mdm.probs[[k, y, x]] > mdm.probs[[best, y, x]] {
                best = k;
            }
        }
        best as u8
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    #[default]
    Full,
    /// Only the defect states relevant to the product.
    Filtered,
}

/// Text states for `mode`, taken from the full roster's embeddings.
pub fn text_for_mode(
    full: &StateTextEmbeddings,
    kba: &Kba,
    product: &str,
    mode: PromptMode,
) -> Result<StateTextEmbeddings> {
    let roster = build_state_roster(kba, product, mode == PromptMode::Filtered)?;
    full.select(&roster)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub height: usize,
    pub width: usize,
    pub upsample: UpsampleMode,
    pub theta: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            height: crate::dataio::IMAGE_SIZE,
            width: crate::dataio::IMAGE_SIZE,
            upsample: UpsampleMode::Bilinear,
            theta: DEFAULT_THETA,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub multi_defect: MultiDefectMap,
    pub anomaly: AnomalyMap,
    pub global_probs: Vec<f64>,
    pub a_x: f64,
    pub decision: Decision,
}

impl Inference {
    pub fn labels(&self) -> LabelMap {
        classify_pixels(&self.multi_defect)
    }
}

/// Full zero-shot pass over already-encoded embeddings.
pub fn infer_embeddings(
    emb: &ImageEmbeddings,
    params: &AdapterParams,
    text: &StateTextEmbeddings,
    opts: &InferOptions,
) -> Result<Inference> {
    let stack = SimilarityMapStack::compute(params, emb, text)?;
    let multi_defect = multi_defect_map(&stack, opts.height, opts.width, opts.upsample)?;
    let anomaly = anomaly_map(&stack, opts.height, opts.width, opts.upsample)?;
    let global: Vec<f64> = emb.global.iter().map(|&v| f64::from(v)).collect();
    let (global_probs, a_x) = global_score(params, text, &global)?;
    let decision = image_decision(&anomaly, a_x, opts.theta);
    Ok(Inference {
        multi_defect,
        anomaly,
        global_probs,
        a_x,
        decision,
    })
}

pub fn infer_image(
    image: &ImageInput<'_>,
    encoder: &dyn ImageEncoder,
    params: &AdapterParams,
    text: &StateTextEmbeddings,
    opts: &InferOptions,
) -> Result<Inference> {
    let emb = encoder.encode_image(image)?;
    emb.validate()?;
    infer_embeddings(&emb, params, text, opts)
}
