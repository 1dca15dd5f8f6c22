//! Frozen backbone abstraction.
//!
//! Image encoders return per-stage patch grids plus a global vector; text
//! encoders turn a [`PromptSet`] into one averaged, unit-norm state vector.
//! Two backends exist: a deterministic [`mock::MockBackend`] and
//! [`precomputed`] embeddings exported by an external backbone run.

pub mod mock;
pub mod precomputed;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::kba::{Kba, NORMAL_STATE};
use crate::prompts::{self, PromptSet};

/// Row-major H×W×3 preprocessed image.
pub type ImageTensor = Array3<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbeddings {
    /// One h×w×N_i grid per stage.
    pub stages: Vec<Array3<f32>>,
    /// Raw global embedding; normalized on use.
    pub global: Vec<f32>,
}

impl ImageEmbeddings {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn shapes(&self) -> Vec<StageShape> {
        self.stages
            .iter()
            .map(|s| {
                let (h, w, c) = s.dim();
                StageShape {
                    height: h,
                    width: w,
                    channels: c,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Backend("image embeddings have no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Backend(format!("stage {i} has an empty grid")));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Backend(format!("stage {i} has non-finite values")));
            }
        }
        if self.global.is_empty() {
            return Err(Error::Backend("empty global embedding".into()));
        }
        Ok(())
    }

    pub fn global_unit(&self) -> Result<Vec<f64>> {
        normalize(
            &self
                .global
                .iter()
                .map(|&v| f64::from(v))
                .collect::<Vec<_>>(),
        )
    }
}

/// What a backend needs to locate or compute an image's embeddings.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    /// Path relative to the dataset root, `/`-separated; keys precomputed records.
    pub key_path: &'a str,
    pub pixels: Option<&'a ImageTensor>,
}

pub trait ImageEncoder: Send + Sync {
    fn stage_shapes(&self) -> Vec<StageShape>;
    fn embed_dim(&self) -> usize;
    fn encode_image(&self, input: &ImageInput<'_>) -> Result<ImageEmbeddings>;
    /// Whether [`ImageInput::pixels`] must be provided.
    fn needs_pixels(&self) -> bool {
        true
    }
}

pub trait TextEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;
    /// Averaged embedding of a prompt set; need not be normalized.
    fn encode_state(&self, set: &PromptSet) -> Result<Vec<f64>>;
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    if !n.is_finite() {
        return Err(Error::NonFinite("vector norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalizes each prompt embedding, averages them, and renormalizes.
pub fn average_embeddings<I>(vectors: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut sum: Option<Vec<f64>> = None;
    for v in vectors {
        let u = normalize(&v)?;
        match &mut sum {
            None => sum = Some(u),
            Some(acc) => {
                if acc.len() != u.len() {
                    return Err(Error::Backend("prompt embeddings differ in width".into()));
                }
                acc.iter_mut().zip(&u).for_each(|(a, b)| *a += b);
            }
        }
    }
    let sum = sum.ok_or_else(|| Error::Backend("empty prompt set".into()))?;
    normalize(&sum)
}

pub fn encode_text_state(backend: &dyn TextEncoder, set: &PromptSet) -> Result<Vec<f64>> {
    if set.prompts.is_empty() {
        return Err(Error::Backend(format!(
            "prompt set `{}` is empty",
            set.state_id
        )));
    }
    let v = backend.encode_state(set)?;
    if v.len() != backend.embed_dim() {
        return Err(Error::Backend(format!(
            "state `{}` embedding has width {} (expected {})",
            set.state_id,
            v.len(),
            backend.embed_dim()
        )));
    }
    normalize(&v)
}

/// K+1 unit-norm state embeddings, normal first.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTextEmbeddings {
    state_ids: Vec<String>,
    vectors: Array2<f64>,
}

impl StateTextEmbeddings {
    pub fn new(state_ids: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if state_ids.len() != vectors.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} state ids for {} vectors",
                state_ids.len(),
                vectors.nrows()
            )));
        }
        if state_ids.len() < 2 {
            return Err(Error::Validation(
                "need the normal state and at least one defect state".into(),
            ));
        }
        if state_ids[0] != NORMAL_STATE {
            return Err(Error::Validation(format!(
                "first state must be `{NORMAL_STATE}`, got `{}`",
                state_ids[0]
            )));
        }
        for (i, row) in vectors.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "state `{}` embedding has norm {n}",
                    state_ids[i]
                )));
            }
        }
        Ok(StateTextEmbeddings { state_ids, vectors })
    }

    /// Encodes the roster of `product` with `backend`.
    pub fn build(
        kba: &Kba,
        product: &str,
        filtered: bool,
        backend: &dyn TextEncoder,
    ) -> Result<Self> {
        let sets = prompts::build_all(kba, product, filtered)?;
        Self::from_prompt_sets(&sets, backend)
    }

    pub fn from_prompt_sets(sets: &[PromptSet], backend: &dyn TextEncoder) -> Result<Self> {
        let dim = backend.embed_dim();
        let mut vectors = Array2::zeros((sets.len(), dim));
        for (i, set) in sets.iter().enumerate() {
            let v = encode_text_state(backend, set)?;
            vectors.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        Self::new(sets.iter().map(|s| s.state_id.clone()).collect(), vectors)
    }

    pub fn state_ids(&self) -> &[String] {
        &self.state_ids
    }

    /// (K+1)×N_z
    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.state_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state_ids.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Rows restricted to `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<Self> {
        let mut vectors = Array2::zeros((ids.len(), self.embed_dim()));
        for (i, id) in ids.iter().enumerate() {
            let j = self
                .state_ids
                .iter()
                .position(|s| s == id)
                .ok_or_else(|| Error::UnknownState(id.clone()))?;
            vectors.row_mut(i).assign(&self.vectors.row(j));
        }
        Self::new(ids.to_vec(), vectors)
    }
}
