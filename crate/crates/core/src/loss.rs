//! Focal and dice losses on up-sampled state maps, and their gradients with
//! respect to the adapter parameters.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::adapter::{forward_stage, AdapterParams, StageAdapter, StageForward};
use crate::encoder::{ImageEmbeddings, StateTextEmbeddings};
use crate::error::{Error, Result};
use crate::infer::{LabelMap, Mask, Resampler, UpsampleMode};

/// Floor applied to the target probability before taking its log.
const MIN_PROB: f64 = 1e-12;
const PROB_SUM_TOL: f64 = 1e-4;
const RANGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub dice_eps: f64,
    /// Per-stage multipliers; empty means all ones.
    pub stage_weights: Vec<f64>,
    /// Score at patch resolution against down-sampled ground truth.
    pub downsample_gt: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            dice_eps: 1.0,
            stage_weights: Vec::new(),
            downsample_gt: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.dice_eps.is_finite() && self.dice_eps > 0.0) {
            return Err(Error::Config(format!(
                "dice_eps must be > 0, got {}",
                self.dice_eps
            )));
        }
        if self.stage_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("stage weights must be finite".into()));
        }
        Ok(())
    }

    pub fn stage_weight(&self, i: usize) -> f64 {
        self.stage_weights.get(i).copied().unwrap_or(1.0)
    }
}

/// Mean of `-(1 - p_y)^γ ln p_y` and its gradient with respect to `probs`.
pub fn focal_loss(
    probs: ArrayView3<f64>,
    target: ArrayView2<u8>,
    gamma: f64,
) -> Result<(f64, Array3<f64>)> {
    let (c, h, w) = probs.dim();
    if target.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "target {:?} vs probabilities {h}×{w}",
            target.dim()
        )));
    }
    let n = (h * w) as f64;
    let mut grad = Array3::zeros((c, h, w));
    let mut total = 0.0;
    for ((y, x), &label) in target.indexed_iter() {
        let label = label as usize;
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let sum: f64 = (0..c).map(|k| probs[[k, y, x]]).sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::NonNormalizedProbs {
                pixel: y * w + x,
                sum,
            });
        }
        let p = probs[[label, y, x]].clamp(MIN_PROB, 1.0);
        let q = 1.0 - p;
        let lp = p.ln();
        total -= q.powf(gamma) * lp;
        let mut d = -q.powf(gamma) / p;
        if gamma != 0.0 && q > 0.0 {
            d += gamma * q.powf(gamma - 1.0) * lp;
        }
        grad[[label, y, x]] = d / n;
    }
    Ok((total / n, grad))
}

/// `1 - (2 Σ pred·t + ε) / (Σ pred + Σ t + ε)` and its gradient with respect to `pred`.
pub fn dice_loss(
    pred: ArrayView2<f64>,
    target: ArrayView2<bool>,
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let w = pred.dim().1;
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for ((pos, &p), &t) in pred.indexed_iter().zip(target.iter()) {
        if !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(&p) {
            return Err(Error::OutOfRangePrediction {
                pixel: pos.0 * w + pos.1,
                value: p,
            });
        }
        let t = f64::from(u8::from(t));
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let num = 2.0 * inter + eps;
    let den = sum_p + sum_t + eps;
    let grad = Array2::from_shape_fn(pred.dim(), |pos| {
        let t = f64::from(u8::from(target[pos]));
        -(2.0 * t * den - num) / (den * den)
    });
    Ok((1.0 - num / den, grad))
}

/// Per-image ground truth at full resolution.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub multi: ArrayView2<'a, u8>,
    pub binary: ArrayView2<'a, bool>,
}

/// Loss value and parameter gradients (same layout as [`AdapterParams::stages`]).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<StageAdapter>,
}

impl LossOutput {
    pub fn zeros_like(params: &AdapterParams) -> Self {
        LossOutput {
            loss: 0.0,
            grads: params
                .stages
                .iter()
                .map(|s| StageAdapter {
                    weight: Array2::zeros(s.weight.raw_dim()),
                    bias: Array1::zeros(s.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &LossOutput, scale: f64) {
        self.loss += scale * other.loss;
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }
}

/// Nearest sampling of a full-resolution map at patch-cell centers.
fn sample_cells<T: Copy>(map: ArrayView2<T>, h: usize, w: usize) -> Array2<T> {
    let (hh, ww) = map.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        map[[
            ((2 * y + 1) * hh / (2 * h)).min(hh - 1),
            ((2 * x + 1) * ww / (2 * w)).min(ww - 1),
        ]]
    })
}

/// Backprop of a (K+1)×h×w gradient on one stage's probabilities into W, b.
fn backward_stage(
    fwd: &StageForward,
    grad_probs: &Array3<f64>,
    text: &StateTextEmbeddings,
    tau: f64,
) -> StageAdapter {
    let hw = fwd.height * fwd.width;
    let k1 = fwd.probs.ncols();
    // (h·w)×(K+1) layout, matching fwd.probs
    let mut g = Array2::<f64>::zeros((hw, k1));
    for k in 0..k1 {
        for y in 0..fwd.height {
            for x in 0..fwd.width {
                g[[y * fwd.width + x, k]] = grad_probs[[k, y, x]];
            }
        }
    }
    // softmax backward, then the 1/τ scale
    for (mut gr, sr) in g.rows_mut().into_iter().zip(fwd.probs.rows()) {
        let dot = gr.dot(&sr);
        gr.zip_mut_with(&sr, |gv, s| *gv = s * (*gv - dot) / tau);
    }
    let mut gz = g.dot(text.vectors());
    // through z = u / ‖u‖
    for ((mut row, z), n) in gz
        .rows_mut()
        .into_iter()
        .zip(fwd.adapted.rows())
        .zip(&fwd.norms)
    {
        let proj = row.dot(&z);
        row.zip_mut_with(&z, |gv, zv| *gv = (*gv - zv * proj) / n);
    }
    StageAdapter {
        weight: gz.t().dot(&fwd.input),
        bias: gz.sum_axis(Axis(0)),
    }
}

/// Weighted sum over stages of focal + dice on the up-sampled maps, with
/// gradients for every stage adapter. The global score takes no part.
pub fn combined_loss(
    forwards: &[StageForward],
    params: &AdapterParams,
    text: &StateTextEmbeddings,
    gt: GroundTruth<'_>,
    cfg: &LossConfig,
    mode: UpsampleMode,
) -> Result<LossOutput> {
    if forwards.len() != params.stage_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} stage passes for {} adapters",
            forwards.len(),
            params.stage_count()
        )));
    }
    if gt.multi.dim() != gt.binary.dim() {
        return Err(Error::ShapeMismatch(
            "multi-defect and binary masks differ in shape".into(),
        ));
    }
    let (hh, ww) = gt.multi.dim();
    let mut out = LossOutput::zeros_like(params);
    for (i, fwd) in forwards.iter().enumerate() {
        let weight = cfg.stage_weight(i);
        if weight == 0.0 {
            continue;
        }
        let coarse = fwd.map();
        let (probs, multi, binary, resampler) = if cfg.downsample_gt {
            (
                coarse,
                sample_cells(gt.multi, fwd.height, fwd.width),
                sample_cells(gt.binary, fwd.height, fwd.width),
                None,
            )
        } else {
            let r = Resampler::new((fwd.height, fwd.width), (hh, ww), mode)?;
            (
                r.forward(coarse.view())?,
                gt.multi.to_owned(),
                gt.binary.to_owned(),
                Some(r),
            )
        };
        let (focal, mut grad) = focal_loss(probs.view(), multi.view(), cfg.gamma)?;
        let pred = probs.index_axis(Axis(0), 0).mapv(|p| 1.0 - p);
        let (dice, dgrad) = dice_loss(pred.view(), binary.view(), cfg.dice_eps)?;
        grad.index_axis_mut(Axis(0), 0).scaled_add(-1.0, &dgrad);
        grad *= weight;
        let coarse_grad = match &resampler {
            Some(r) => r.backward(grad.view()),
            None => grad,
        };
        let g = backward_stage(fwd, &coarse_grad, text, params.tau);
        out.loss += weight * (focal + dice);
        out.grads[i].weight += &g.weight;
        out.grads[i].bias += &g.bias;
    }
    Ok(out)
}

/// Forward pass plus [`combined_loss`] for one image.
pub fn image_loss(
    params: &AdapterParams,
    emb: &ImageEmbeddings,
    text: &StateTextEmbeddings,
    gt: GroundTruth<'_>,
    cfg: &LossConfig,
    mode: UpsampleMode,
) -> Result<LossOutput> {
    params.check_embeddings(emb)?;
    let forwards = emb
        .stages
        .iter()
        .enumerate()
        .map(|(i, g)| forward_stage(params, i, g.view(), text))
        .collect::<Result<Vec<_>>>()?;
    combined_loss(&forwards, params, text, gt, cfg, mode)
}

/// Binary mask implied by a label map.
pub fn binary_from_labels(labels: &LabelMap) -> Mask {
    labels.mapv(|l| l != 0)
}
