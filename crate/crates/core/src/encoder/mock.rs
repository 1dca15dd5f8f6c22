//! Deterministic stand-in for the backbone.
//!
//! Patch features are fixed random projections of local pixel statistics
//! (per-channel mean and standard deviation), so regions that differ in color
//! or texture get different embeddings. Text embeddings are seeded from a hash
//! of the prompt string.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    average_embeddings, ImageEmbeddings, ImageEncoder, ImageInput, StageShape, TextEncoder,
};
use crate::binio::fnv1a64;
use crate::error::{Error, Result};
use crate::prompts::PromptSet;

const STAT_FEATURES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    pub seed: u64,
    pub embed_dim: usize,
    pub stages: Vec<StageShape>,
}

impl MockConfig {
    /// `m` identical stages of `grid`×`grid` patches with `width` channels.
    pub fn uniform(seed: u64, m: usize, grid: usize, width: usize, embed_dim: usize) -> Self {
        MockConfig {
            seed,
            embed_dim,
            stages: vec![
                StageShape {
                    height: grid,
                    width: grid,
                    channels: width,
                };
                m
            ],
        }
    }
}

impl Default for MockConfig {
    /// 37×37 patches matches a 14-pixel patch size at 518×518.
    fn default() -> Self {
        MockConfig::uniform(0, 4, 37, 64, 32)
    }
}

struct Projection {
    weights: Array2<f64>,
    offset: Vec<f64>,
}

impl Projection {
    fn seeded(seed: u64, out: usize, inp: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Array2::from_shape_simple_fn((out, inp), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let offset = (0..out)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                0.5 * v
            })
            .collect();
        Projection { weights, offset }
    }

    fn apply(&self, x: &[f64; STAT_FEATURES], out: &mut [f32]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.weights.row(r);
            let mut acc = self.offset[r];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o = acc.tanh() as f32;
        }
    }
}

pub struct MockBackend {
    config: MockConfig,
    stage_proj: Vec<Projection>,
    global_proj: Projection,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Result<Self> {
        if config.stages.is_empty() || config.embed_dim == 0 {
            return Err(Error::Config(
                "mock backend needs stages and a positive width".into(),
            ));
        }
        if config
            .stages
            .iter()
            .any(|s| s.height == 0 || s.width == 0 || s.channels == 0)
        {
            return Err(Error::Config(
                "mock stage dimensions must be positive".into(),
            ));
        }
        let stage_proj = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Projection::seeded(
                    config.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)),
                    s.channels,
                    STAT_FEATURES,
                )
            })
            .collect();
        let global_proj = Projection::seeded(
            config.seed ^ 0x5151_5151_5151_5151,
            config.embed_dim,
            STAT_FEATURES,
        );
        Ok(MockBackend {
            config,
            stage_proj,
            global_proj,
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Embedding of a single prompt.
    pub fn encode_prompt(&self, prompt: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ fnv1a64(prompt.as_bytes()));
        (0..self.config.embed_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

/// Per-channel mean and standard deviation over rows `y0..y1`, cols `x0..x1`.
fn region_stats(img: &Array3<f32>, y0: usize, y1: usize, x0: usize, x1: usize) -> [f64; 6] {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..3 {
                let v = f64::from(img[[y, x, c]]);
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    let mut out = [0.0; 6];
    for c in 0..3 {
        let mean = sum[c] / n;
        out[c] = mean;
        out[3 + c] = (sq[c] / n - mean * mean).max(0.0).sqrt();
    }
    out
}

impl ImageEncoder for MockBackend {
    fn stage_shapes(&self) -> Vec<StageShape> {
        self.config.stages.clone()
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn encode_image(&self, input: &ImageInput<'_>) -> Result<ImageEmbeddings> {
        let img = input.pixels.ok_or_else(|| {
            Error::Backend(format!(
                "mock backend needs pixels for `{}`",
                input.key_path
            ))
        })?;
        let (ih, iw, ch) = img.dim();
        if ch != 3 {
            return Err(Error::Backend(format!("expected 3 channels, got {ch}")));
        }
        let mut stages = Vec::with_capacity(self.config.stages.len());
        for (shape, proj) in self.config.stages.iter().zip(&self.stage_proj) {
            if shape.height > ih || shape.width > iw {
                return Err(Error::Backend(format!(
                    "image {ih}×{iw} smaller than patch grid {}×{}",
                    shape.height, shape.width
                )));
            }
            let mut grid = Array3::<f32>::zeros((shape.height, shape.width, shape.channels));
            for gy in 0..shape.height {
                let (y0, y1) = (gy * ih / shape.height, (gy + 1) * ih / shape.height);
                for gx in 0..shape.width {
                    let (x0, x1) = (gx * iw / shape.width, (gx + 1) * iw / shape.width);
                    let stats = region_stats(img, y0, y1, x0, x1);
                    let mut cell = grid.slice_mut(ndarray::s![gy, gx, ..]);
                    proj.apply(&stats, cell.as_slice_mut().expect("contiguous cell"));
                }
            }
            stages.push(grid);
        }
        let stats = region_stats(img, 0, ih, 0, iw);
        let mut global = vec![0.0f32; self.config.embed_dim];
        self.global_proj.apply(&stats, &mut global);
        Ok(ImageEmbeddings { stages, global })
    }
}

impl TextEncoder for MockBackend {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn encode_state(&self, set: &PromptSet) -> Result<Vec<f64>> {
        average_embeddings(set.prompts.iter().map(|p| self.encode_prompt(p)))
    }
}
