//! Per-stage linear adapters and the state-probability maps they feed.
//!
//! A patch embedding `e` at stage `i` is mapped to `z = normalize(W_i e + b_i)`;
//! each pixel's state probabilities are a temperature softmax of the cosine
//! similarities between `z` and the K+1 text-state embeddings.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, Reader, Writer};
use crate::encoder::{normalize, ImageEmbeddings, StageShape, StateTextEmbeddings};
use crate::error::{Error, Result};

pub const ADAPTER_MAGIC: &[u8; 8] = b"MADSADP1";
const VERSION: u32 = 1;
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct StageAdapter {
    /// N_z × N_i
    pub weight: Array2<f64>,
    /// N_z
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub stages: Vec<StageAdapter>,
    pub tau: f64,
}

impl AdapterParams {
    /// Fan-in uniform weights in ±1/√N_i, zero bias.
    pub fn init(shapes: &[StageShape], embed_dim: usize, tau: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = shapes
            .iter()
            .map(|s| {
                let bound = 1.0 / (s.channels as f64).sqrt();
                StageAdapter {
                    weight: Array2::from_shape_simple_fn((embed_dim, s.channels), || {
                        rng.random_range(-bound..bound)
                    }),
                    bias: Array1::zeros(embed_dim),
                }
            })
            .collect();
        let p = AdapterParams { stages, tau };
        p.validate()?;
        Ok(p)
    }

    /// Identity-like adapters (N_i must equal N_z at every stage).
    pub fn identity(shapes: &[StageShape], tau: f64) -> Result<Self> {
        let stages = shapes
            .iter()
            .map(|s| StageAdapter {
                weight: Array2::eye(s.channels),
                bias: Array1::zeros(s.channels),
            })
            .collect();
        let p = AdapterParams { stages, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Validation("adapter has no stages".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        let nz = self.embed_dim();
        for (i, s) in self.stages.iter().enumerate() {
            if s.weight.nrows() != nz || s.bias.len() != nz {
                return Err(Error::ShapeMismatch(format!(
                    "stage {i} projects to {} (bias {}), expected {nz}",
                    s.weight.nrows(),
                    s.bias.len()
                )));
            }
            if s.weight.iter().chain(s.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("adapter stage {i}")));
            }
        }
        Ok(())
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.stages.first().map_or(0, |s| s.weight.nrows())
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.weight.ncols()).collect()
    }

    /// Rounds every parameter to the f32 checkpoint precision.
    pub fn quantized(&self) -> Self {
        let q = |v: &f64| f64::from(*v as f32);
        AdapterParams {
            stages: self
                .stages
                .iter()
                .map(|s| StageAdapter {
                    weight: s.weight.map(q),
                    bias: s.bias.map(q),
                })
                .collect(),
            tau: q(&self.tau),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::new(ADAPTER_MAGIC);
        w.u32(VERSION);
        w.usize32(self.stage_count(), "stage count")?;
        w.usize32(self.embed_dim(), "N_z")?;
        w.f32(self.tau as f32);
        for s in &self.stages {
            w.usize32(s.weight.ncols(), "N_i")?;
            w.f64s_as_f32(s.weight.iter());
            w.f64s_as_f32(s.bias.iter());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, ADAPTER_MAGIC, "MADSADP1")?;
        r.version(VERSION)?;
        let m = r.u32()? as usize;
        let nz = r.u32()? as usize;
        let tau = f64::from(r.f32()?);
        let mut stages = Vec::with_capacity(m);
        for _ in 0..m {
            let ni = r.u32()? as usize;
            let weight = Array2::from_shape_vec((nz, ni), r.f32s_as_f64(nz * ni)?)
                .map_err(|e| Error::Parse(e.to_string()))?;
            let bias = Array1::from(r.f32s_as_f64(nz)?);
            stages.push(StageAdapter { weight, bias });
        }
        r.finish()?;
        let p = AdapterParams { stages, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn check_embeddings(&self, emb: &ImageEmbeddings) -> Result<()> {
        if emb.stages.len() != self.stage_count() {
            return Err(Error::DimensionMismatch(format!(
                "embeddings have {} stages, adapter has {}",
                emb.stages.len(),
                self.stage_count()
            )));
        }
        for (i, (grid, s)) in emb.stages.iter().zip(&self.stages).enumerate() {
            if grid.dim().2 != s.weight.ncols() {
                return Err(Error::ShapeMismatch(format!(
                    "stage {i} width {} but adapter expects {}",
                    grid.dim().2,
                    s.weight.ncols()
                )));
            }
        }
        Ok(())
    }
}

/// Flattens an h×w×N grid into an (h·w)×N matrix of f64.
pub(crate) fn flatten_grid(grid: ArrayView3<f32>) -> Array2<f64> {
    let (h, w, c) = grid.dim();
    let mut out = Array2::zeros((h * w, c));
    for ((y, x, k), v) in grid.indexed_iter() {
        out[[y * w + x, k]] = f64::from(*v);
    }
    out
}

/// Intermediate values of one stage's forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct StageForward {
    pub height: usize,
    pub width: usize,
    /// (h·w)×N_i
    pub input: Array2<f64>,
    /// ‖W e + b‖ per pixel
    pub norms: Array1<f64>,
    /// (h·w)×N_z unit rows
    pub adapted: Array2<f64>,
    /// (h·w)×(K+1) state probabilities
    pub probs: Array2<f64>,
}

impl StageForward {
    /// (K+1)×h×w view of the probabilities.
    pub fn map(&self) -> Array3<f64> {
        let k1 = self.probs.ncols();
        let mut out = Array3::zeros((k1, self.height, self.width));
        for (p, row) in self.probs.rows().into_iter().enumerate() {
            let (y, x) = (p / self.width, p % self.width);
            for (k, v) in row.iter().enumerate() {
                out[[k, y, x]] = *v;
            }
        }
        out
    }
}

fn project_rows(adapter: &StageAdapter, input: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    if input.ncols() != adapter.weight.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "stage width {} but adapter expects {}",
            input.ncols(),
            adapter.weight.ncols()
        )));
    }
    let mut u = input.dot(&adapter.weight.t());
    u += &adapter.bias;
    let mut norms = Array1::zeros(u.nrows());
    for (p, mut row) in u.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        if !n.is_finite() {
            return Err(Error::NonFinite(format!("projected patch {p}")));
        }
        row /= n;
        norms[p] = n;
    }
    Ok((norms, u))
}

/// Row-wise temperature softmax of `sims / tau`, max-subtracted.
pub fn softmax_rows(sims: &mut Array2<f64>, tau: f64) {
    for mut row in sims.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| ((s - max) / tau).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Adapted, unit-norm h×w×N_z grid for stage `stage_index`.
pub fn project(
    params: &AdapterParams,
    stage: ArrayView3<f32>,
    stage_index: usize,
) -> Result<Array3<f64>> {
    let adapter = params
        .stages
        .get(stage_index)
        .ok_or_else(|| Error::ShapeMismatch(format!("no adapter for stage {stage_index}")))?;
    let (h, w, _) = stage.dim();
    let (_, z) = project_rows(adapter, &flatten_grid(stage))?;
    let nz = z.ncols();
    Ok(z.into_shape_with_order((h, w, nz))
        .expect("row-major reshape"))
}

/// (K+1)×h×w state probabilities of an adapted grid.
pub fn similarity_map(
    adapted: ArrayView3<f64>,
    text: &StateTextEmbeddings,
    tau: f64,
) -> Result<Array3<f64>> {
    let (h, w, nz) = adapted.dim();
    if nz != text.embed_dim() {
        return Err(Error::ShapeMismatch(format!(
            "adapted width {nz} vs text width {}",
            text.embed_dim()
        )));
    }
    let flat = adapted
        .to_owned()
        .into_shape_with_order((h * w, nz))
        .expect("row-major reshape");
    let probs = state_probs(flat.view(), text, tau);
    Ok(StageForward {
        height: h,
        width: w,
        input: Array2::zeros((0, 0)),
        norms: Array1::zeros(0),
        adapted: flat,
        probs,
    }
    .map())
}

fn state_probs(adapted: ArrayView2<f64>, text: &StateTextEmbeddings, tau: f64) -> Array2<f64> {
    let mut sims = adapted.dot(&text.vectors().t());
    softmax_rows(&mut sims, tau);
    sims
}

/// Forward pass of one stage, retaining everything backprop needs.
pub fn forward_stage(
    params: &AdapterParams,
    stage_index: usize,
    grid: ArrayView3<f32>,
    text: &StateTextEmbeddings,
) -> Result<StageForward> {
    let adapter = params
        .stages
        .get(stage_index)
        .ok_or_else(|| Error::ShapeMismatch(format!("no adapter for stage {stage_index}")))?;
    if params.embed_dim() != text.embed_dim() {
        return Err(Error::ShapeMismatch(format!(
            "adapter width {} vs text width {}",
            params.embed_dim(),
            text.embed_dim()
        )));
    }
    let (h, w, _) = grid.dim();
    let input = flatten_grid(grid);
    let (norms, adapted) = project_rows(adapter, &input)?;
    let probs = state_probs(adapted.view(), text, params.tau);
    Ok(StageForward {
        height: h,
        width: w,
        input,
        norms,
        adapted,
        probs,
    })
}

/// m per-stage (K+1)×h_i×w_i probability maps for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMapStack {
    pub maps: Vec<Array3<f64>>,
    pub state_ids: Vec<String>,
}

impl SimilarityMapStack {
    pub fn compute(
        params: &AdapterParams,
        emb: &ImageEmbeddings,
        text: &StateTextEmbeddings,
    ) -> Result<Self> {
        params.check_embeddings(emb)?;
        let maps = emb
            .stages
            .iter()
            .enumerate()
            .map(|(i, g)| forward_stage(params, i, g.view(), text).map(|f| f.map()))
            .collect::<Result<Vec<_>>>()?;
        Ok(SimilarityMapStack {
            maps,
            state_ids: text.state_ids().to_vec(),
        })
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for m in &self.maps {
            let sums = m.sum_axis(Axis(0));
            for (p, s) in sums.iter().enumerate() {
                if (s - 1.0).abs() > tol || m.iter().any(|v| *v < 0.0) {
                    return Err(Error::NonNormalizedProbs { pixel: p, sum: *s });
                }
            }
        }
        Ok(())
    }
}

/// Softmax over the K+1 states of the global embedding, and `a_x = 1 − p_normal`.
pub fn global_score(
    params: &AdapterParams,
    text: &StateTextEmbeddings,
    global: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if global.len() != text.embed_dim() {
        return Err(Error::ShapeMismatch(format!(
            "global width {} vs text width {}",
            global.len(),
            text.embed_dim()
        )));
    }
    let g = normalize(global)?;
    let row = Array2::from_shape_vec((1, g.len()), g).expect("1×N");
    let probs = state_probs(row.view(), text, params.tau);
    let probs = probs.row(0).to_vec();
    let a_x = 1.0 - probs[0];
    Ok((probs, a_x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn text(rows: Vec<Vec<f64>>) -> StateTextEmbeddings {
        let k = rows.len();
        let n = rows[0].len();
        let ids = std::iter::once("normal".to_string())
            .chain((1..k).map(|i| format!("d{i}")))
            .collect();
        let flat: Vec<f64> = rows
            .into_iter()
            .flat_map(|r| normalize(&r).unwrap())
            .collect();
        StateTextEmbeddings::new(ids, Array2::from_shape_vec((k, n), flat).unwrap()).unwrap()
    }

    fn shape(c: usize) -> StageShape {
        StageShape {
            height: 1,
            width: 1,
            channels: c,
        }
    }

    #[test]
    fn identity_projection_keeps_unit_patch() {
        let p = AdapterParams::identity(&[shape(3)], DEFAULT_TAU).unwrap();
        let grid = array![[[0.6f32, 0.0, 0.8]]];
        let out = project(&p, grid.view(), 0).unwrap();
        assert!((out[[0, 0, 0]] - 0.6).abs() < 1e-7 && (out[[0, 0, 2]] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_patch_without_bias_is_zero_vector() {
        let p = AdapterParams::identity(&[shape(3)], DEFAULT_TAU).unwrap();
        let grid = Array3::<f32>::zeros((1, 1, 3));
        assert!(matches!(
            project(&p, grid.view(), 0),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn projection_matches_matmul_oracle() {
        let p = AdapterParams::init(&[shape(3)], 4, DEFAULT_TAU, 11).unwrap();
        let grid = Array3::from_shape_fn((2, 2, 3), |(y, x, c)| {
            (y as f32 - 0.4) * (x as f32 + 0.7) + c as f32 * 0.3
        });
        let out = project(&p, grid.view(), 0).unwrap();
        let w = &p.stages[0].weight;
        for y in 0..2 {
            for x in 0..2 {
                let mut z = [0.0f64; 4];
                for r in 0..4 {
                    for c in 0..3 {
                        z[r] += w[[r, c]] * f64::from(grid[[y, x, c]]);
                    }
                }
                let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                for r in 0..4 {
                    assert!((out[[y, x, r]] - z[r] / n).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn identical_text_rows_give_uniform_probs() {
        let t = text(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let adapted = Array3::from_shape_fn((2, 2, 2), |(y, _, c)| if c == y { 1.0 } else { 0.0 });
        let m = similarity_map(adapted.view(), &t, 0.07).unwrap();
        assert!(m.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn small_tau_concentrates_mass() {
        let t = text(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let adapted = array![[[0.8, 0.6]]];
        let m = similarity_map(adapted.view(), &t, 0.001).unwrap();
        assert!(m[[0, 0, 0]] > 0.999);
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        // cosines (0.9, 0.1): text rows chosen so that <z, t_j> hits them exactly
        let t = text(vec![
            vec![0.9, (1.0f64 - 0.81).sqrt()],
            vec![0.1, (1.0f64 - 0.01).sqrt()],
        ]);
        let adapted = array![[[1.0, 0.0]]];
        let m = similarity_map(adapted.view(), &t, 0.07).unwrap();
        let (a, b) = ((0.9f64 / 0.07).exp(), (0.1f64 / 0.07).exp());
        assert!((m[[0, 0, 0]] - a / (a + b)).abs() < 1e-9);
        assert!((m[[1, 0, 0]] - b / (a + b)).abs() < 1e-9);
    }

    #[test]
    fn global_score_examples() {
        let p = AdapterParams::identity(&[shape(3)], 0.07).unwrap();
        let t = text(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let (probs, a_x) = global_score(&p, &t, &[1.0, 0.0, 0.0]).unwrap();
        // oracle: softmax of (1, 0, 0)/0.07
        let e = (1.0f64 / 0.07).exp();
        assert!((a_x - 2.0 / (e + 2.0)).abs() < 1e-12);
        assert!(a_x < 0.01);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let t2 = text(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p2 = AdapterParams::identity(&[shape(2)], 0.07).unwrap();
        let (_, a) = global_score(&p2, &t2, &[1.0, 1.0]).unwrap();
        assert!((a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let shapes = [shape(5), shape(3)];
        let p = AdapterParams::init(&shapes, 4, 0.07, 3)
            .unwrap()
            .quantized();
        let bytes = p.to_bytes().unwrap();
        let q = AdapterParams::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(bytes, q.to_bytes().unwrap());
    }
}
