//! Threshold-free detection and segmentation metrics.
//!
//! Conventions: AUROC counts ties as one half; AP is the step-wise sum of
//! precision at each recall increment with tied scores grouped; F1-max sweeps
//! the distinct scores with `score >= t` as the positive prediction.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const AUPRO_THRESHOLDS: usize = 200;

/// Scores with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::DegenerateLabels);
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("metric scores".into()));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    /// (positives, negatives) per distinct score, highest score first.
    fn groups(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut out: Vec<(usize, usize)> = Vec::new();
        let mut last = None;
        for i in idx {
            let s = self.scores[i];
            if last != Some(s) {
                out.push((0, 0));
                last = Some(s);
            }
            let g = out.last_mut().expect("pushed");
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        out
    }
}

pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let p = s.positives();
    let n = s.labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut pos_above = 0.0;
    let mut acc = 0.0;
    for (gp, gn) in s.groups() {
        acc += gn as f64 * (pos_above + 0.5 * gp as f64);
        pos_above += gp as f64;
    }
    Ok(acc / (p as f64 * n as f64))
}

pub fn average_precision(s: &ScoredSet) -> Result<f64> {
    let p = s.positives();
    if p == 0 {
        return Err(Error::NoPositives);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (gp, gn) in s.groups() {
        tp += gp;
        fp += gn;
        if gp > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (gp as f64 / p as f64);
        }
    }
    Ok(ap)
}

pub fn f1_max(s: &ScoredSet) -> Result<f64> {
    let p = s.positives();
    if p == 0 {
        return Err(Error::NoPositives);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    for (gp, gn) in s.groups() {
        tp += gp;
        fp += gn;
        best = best.max(2.0 * tp as f64 / (tp + fp + p) as f64);
    }
    Ok(best)
}

/// 8-connected components of `mask`, labelled 1.. in raster order of first
/// pixel; 0 is background. Returns the label image and the component count.
pub fn connected_regions(mask: ArrayView2<bool>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let here = y * w + x;
            // previously visited neighbours: W, NW, N, NE
            let mut neigh = Vec::with_capacity(4);
            if x > 0 {
                neigh.push((y, x - 1));
            }
            if y > 0 {
                if x > 0 {
                    neigh.push((y - 1, x - 1));
                }
                neigh.push((y - 1, x));
                if x + 1 < w {
                    neigh.push((y - 1, x + 1));
                }
            }
            for (ny, nx) in neigh {
                if mask[[ny, nx]] {
                    let a = find(&mut parent, here);
                    let b = find(&mut parent, ny * w + nx);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut ids = std::collections::HashMap::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                let root = find(&mut parent, y * w + x);
                let next = ids.len() as u32 + 1;
                labels[[y, x]] = *ids.entry(root).or_insert(next);
            }
        }
    }
    (labels, ids.len())
}

/// Linear-interpolation quantile of an ascending slice, `q` in [0, 1].
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Number of entries of an ascending slice that are `>= t`.
fn count_at_least(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|v| *v < t)
}

/// Trapezoid area under a curve sorted by x, up to `limit` (interpolated).
pub fn trapezoid_until(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area
}

/// (FPR, PRO) operating points for descending thresholds, starting at (0, 0).
pub fn pro_curve(maps: &[ArrayView2<f64>], masks: &[ArrayView2<bool>]) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut negatives = Vec::new();
    let mut regions: Vec<Vec<f64>> = Vec::new();
    let mut pooled = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.dim() != mask.dim() {
            return Err(Error::ShapeMismatch(format!(
                "map {:?} vs mask {:?}",
                map.dim(),
                mask.dim()
            )));
        }
        let (labels, count) = connected_regions(mask.view());
        let first = regions.len();
        regions.resize(first + count, Vec::new());
        for ((&s, &l), &m) in map.iter().zip(labels.iter()).zip(mask.iter()) {
            if !s.is_finite() {
                return Err(Error::NonFinite("anomaly map".into()));
            }
            pooled.push(s);
            if m {
                regions[first + l as usize - 1].push(s);
            } else {
                negatives.push(s);
            }
        }
    }
    if regions.is_empty() {
        return Err(Error::NoRegions);
    }
    if negatives.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    pooled.sort_by(f64::total_cmp);
    negatives.sort_by(f64::total_cmp);
    for r in &mut regions {
        r.sort_by(f64::total_cmp);
    }
    let mut curve = vec![(0.0, 0.0)];
    for k in (0..AUPRO_THRESHOLDS).rev() {
        let t = sorted_quantile(&pooled, k as f64 / (AUPRO_THRESHOLDS - 1) as f64);
        let fpr = count_at_least(&negatives, t) as f64 / negatives.len() as f64;
        let pro = regions
            .iter()
            .map(|r| count_at_least(r, t) as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, pro));
    }
    Ok(curve)
}

/// Normalized area under the PRO curve for FPR in [0, fpr_limit].
pub fn aupro(maps: &[ArrayView2<f64>], masks: &[ArrayView2<bool>], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Config(format!(
            "fpr_limit must lie in (0, 1], got {fpr_limit}"
        )));
    }
    let curve = pro_curve(maps, masks)?;
    Ok(trapezoid_until(&curve, fpr_limit) / fpr_limit)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MtasScores {
    pub auroc: Option<f64>,
    pub f1: Option<f64>,
    pub ap: Option<f64>,
}

/// One image's multi-type prediction and ground truth.
#[derive(Debug, Clone, Copy)]
pub struct MtasItem<'a> {
    /// (K+1)×H×W channel probabilities.
    pub probs: ArrayView3<'a, f64>,
    pub pred: ArrayView2<'a, u8>,
    pub gt: ArrayView2<'a, u8>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Macro-averaged one-vs-rest metrics over defect classes `1..=K`, pooled
/// over pixels of all items.
///
/// AUROC and AP use channel probabilities and include a class when it occurs
/// in the ground truth; F1 uses the hard labels and includes a class when it
/// occurs in the ground truth or the prediction.
pub fn mtas_metrics(items: &[MtasItem<'_>], k: usize) -> Result<MtasScores> {
    if k == 0 {
        return Err(Error::Config("need at least one defect class".into()));
    }
    for it in items {
        let (c, h, w) = it.probs.dim();
        if c != k + 1 || it.pred.dim() != (h, w) || it.gt.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?}/{:?} vs ground truth {:?} for {} classes",
                it.probs.dim(),
                it.pred.dim(),
                it.gt.dim(),
                k + 1
            )));
        }
    }
    let gt: Vec<u8> = items.iter().flat_map(|it| it.gt.iter().copied()).collect();
    let pred: Vec<u8> = items
        .iter()
        .flat_map(|it| it.pred.iter().copied())
        .collect();
    if let Some(&l) = gt.iter().chain(&pred).find(|&&l| l as usize > k) {
        return Err(Error::LabelOutOfRange {
            label: l as usize,
            classes: k + 1,
        });
    }
    let (mut aurocs, mut aps, mut f1s) = (Vec::new(), Vec::new(), Vec::new());
    for j in 1..=k {
        let j8 = j as u8;
        let labels: Vec<bool> = gt.iter().map(|&g| g == j8).collect();
        let present = labels.iter().any(|l| *l);
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for (&g, &p) in gt.iter().zip(&pred) {
            match (g == j8, p == j8) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fnn += 1,
                _ => {}
            }
        }
        if present || tp + fp > 0 {
            f1s.push(2.0 * tp as f64 / (2 * tp + fp + fnn) as f64);
        }
        if present {
            let scores: Vec<f64> = items
                .iter()
                .flat_map(|it| {
                    it.probs
                        .index_axis(Axis(0), j)
                        .iter()
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect();
            let set = ScoredSet::new(scores, labels)?;
            if set.positives() < set.labels.len() {
                aurocs.push(auroc(&set)?);
            }
            aps.push(average_precision(&set)?);
        }
    }
    Ok(MtasScores {
        auroc: mean(&aurocs),
        f1: mean(&f1s),
        ap: mean(&aps),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelScores {
    pub auroc: Option<f64>,
    pub f1max: Option<f64>,
    pub ap: Option<f64>,
    pub aupro: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageScores {
    pub auroc: Option<f64>,
    pub f1max: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProductReport {
    pub pixel: PixelScores,
    pub image: ImageScores,
    pub mtas: MtasScores,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub products: IndexMap<String, ProductReport>,
    pub average: ProductReport,
    /// Anomalous test images without per-defect masks, left out of MTAS.
    #[serde(default)]
    pub binary_only_images: usize,
}

/// One evaluated test image.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub anomaly: Array2<f64>,
    pub image_score: f64,
    pub gt_mask: Array2<bool>,
    /// Channel probabilities and hard labels, when the run produced them.
    pub multi_defect: Option<(ndarray::Array3<f64>, Array2<u8>)>,
    /// Multi-defect ground truth; `None` for binary-only anomalous images.
    pub gt_multi: Option<Array2<u8>>,
}

impl EvalRecord {
    pub fn is_anomalous(&self) -> bool {
        self.gt_mask.iter().any(|m| *m)
    }
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateLabels | Error::NoPositives | Error::NoRegions) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Metrics for one product; undefined metrics are `None`.
pub fn evaluate_product(records: &[EvalRecord], k: usize) -> Result<ProductReport> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let image = ScoredSet::new(
        records.iter().map(|r| r.image_score).collect(),
        records.iter().map(EvalRecord::is_anomalous).collect(),
    )?;
    let pixels = ScoredSet::new(
        records
            .iter()
            .flat_map(|r| r.anomaly.iter().copied())
            .collect(),
        records
            .iter()
            .flat_map(|r| r.gt_mask.iter().copied())
            .collect(),
    )?;
    let maps: Vec<_> = records.iter().map(|r| r.anomaly.view()).collect();
    let masks: Vec<_> = records.iter().map(|r| r.gt_mask.view()).collect();
    let mtas_items: Vec<MtasItem<'_>> = records
        .iter()
        .filter_map(|r| match (&r.multi_defect, &r.gt_multi) {
            (Some((p, l)), Some(g)) => Some(MtasItem {
                probs: p.view(),
                pred: l.view(),
                gt: g.view(),
            }),
            _ => None,
        })
        .collect();
    let mtas = if mtas_items.is_empty() {
        MtasScores::default()
    } else {
        mtas_metrics(&mtas_items, k)?
    };
    Ok(ProductReport {
        pixel: PixelScores {
            auroc: defined(auroc(&pixels))?,
            f1max: defined(f1_max(&pixels))?,
            ap: defined(average_precision(&pixels))?,
            aupro: defined(aupro(&maps, &masks, DEFAULT_FPR_LIMIT))?,
        },
        image: ImageScores {
            auroc: defined(auroc(&image))?,
            f1max: defined(f1_max(&image))?,
            ap: defined(average_precision(&image))?,
        },
        mtas,
    })
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    mean(&vals.flatten().collect::<Vec<_>>())
}

/// Unweighted mean over products of every defined metric.
pub fn average_reports<'a>(
    reports: impl Iterator<Item = &'a ProductReport> + Clone,
) -> ProductReport {
    let m = |f: fn(&ProductReport) -> Option<f64>| mean_opt(reports.clone().map(f));
    ProductReport {
        pixel: PixelScores {
            auroc: m(|r| r.pixel.auroc),
            f1max: m(|r| r.pixel.f1max),
            ap: m(|r| r.pixel.ap),
            aupro: m(|r| r.pixel.aupro),
        },
        image: ImageScores {
            auroc: m(|r| r.image.auroc),
            f1max: m(|r| r.image.f1max),
            ap: m(|r| r.image.ap),
        },
        mtas: MtasScores {
            auroc: m(|r| r.mtas.auroc),
            f1: m(|r| r.mtas.f1),
            ap: m(|r| r.mtas.ap),
        },
    }
}
