//! Independent reference implementations and random instance builders.
//! These deliberately avoid the library's own helpers where a slower,
//! more literal formulation exists.

#![allow(dead_code)]

use std::collections::VecDeque;

use multiads::adapter::{AdapterParams, StageAdapter};
use multiads::encoder::{ImageEmbeddings, StateTextEmbeddings};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((rows, cols), || gaussian(rng));
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

pub fn random_text(rng: &mut impl Rng, k1: usize, nz: usize) -> StateTextEmbeddings {
    let ids = std::iter::once("normal".to_string())
        .chain((1..k1).map(|i| format!("defect{i}")))
        .collect();
    StateTextEmbeddings::new(ids, unit_rows(rng, k1, nz)).unwrap()
}

pub fn random_embeddings(
    rng: &mut impl Rng,
    shapes: &[(usize, usize, usize)],
    nz: usize,
) -> ImageEmbeddings {
    ImageEmbeddings {
        stages: shapes
            .iter()
            .map(|&(h, w, c)| Array3::from_shape_simple_fn((h, w, c), || gaussian(rng) as f32))
            .collect(),
        global: (0..nz).map(|_| gaussian(rng) as f32).collect(),
    }
}

pub fn random_params(rng: &mut impl Rng, widths: &[usize], nz: usize, tau: f64) -> AdapterParams {
    AdapterParams {
        stages: widths
            .iter()
            .map(|&c| StageAdapter {
                weight: Array2::from_shape_simple_fn((nz, c), || gaussian(rng) / (c as f64).sqrt()),
                bias: Array1::from_shape_simple_fn(nz, || 0.1 * gaussian(rng)),
            })
            .collect(),
        tau,
    }
}

/// Pairwise AUROC with ties worth one half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut acc = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                acc += 1.0;
            } else if scores[i] == scores[j] {
                acc += 0.5;
            }
        }
    }
    acc / pairs
}

fn distinct_desc(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

fn confusion(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fneg = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= t, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    (tp, fp, fneg)
}

/// AP as Σ (R_k − R_{k−1}) P_k over every distinct threshold.
pub fn ap_thresholds(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|l| **l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in distinct_desc(scores) {
        let (tp, fp, _) = confusion(scores, labels, t);
        let recall = tp / p;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 };
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

pub fn f1_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    distinct_desc(scores)
        .into_iter()
        .map(|t| {
            let (tp, fp, fneg) = confusion(scores, labels, t);
            2.0 * tp / (2.0 * tp + fp + fneg)
        })
        .fold(0.0, f64::max)
}

/// 8-connected regions by breadth-first flood fill.
pub fn regions_bfs(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || seen[[y, x]] {
                continue;
            }
            let mut region = Vec::new();
            let mut q = VecDeque::from([(y, x)]);
            seen[[y, x]] = true;
            while let Some((cy, cx)) = q.pop_front() {
                region.push((cy, cx));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            q.push_back((ny, nx));
                        }
                    }
                }
            }
            out.push(region);
        }
    }
    out
}

/// Per-threshold pixel scan: thresholds are 200 linearly interpolated
/// quantiles of all scores, curve starts at (0, 0), trapezoid to the limit.
pub fn aupro_naive(maps: &[Array2<f64>], masks: &[Array2<bool>], limit: f64) -> f64 {
    let mut pooled: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = pooled.len();
    let regions: Vec<(usize, Vec<(usize, usize)>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| regions_bfs(m).into_iter().map(move |r| (i, r)))
        .collect();
    let negatives: usize = masks
        .iter()
        .map(|m| m.iter().filter(|v| !**v).count())
        .sum();
    let mut curve = vec![(0.0, 0.0)];
    for k in (0..200).rev() {
        let pos = k as f64 / 199.0 * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let t = pooled[lo] + (pos - lo as f64) * (pooled[hi] - pooled[lo]);
        let mut fp = 0;
        for (m, mask) in maps.iter().zip(masks) {
            for (s, g) in m.iter().zip(mask.iter()) {
                if !*g && *s >= t {
                    fp += 1;
                }
            }
        }
        let mut pro = 0.0;
        for (i, r) in &regions {
            let hit = r.iter().filter(|&&(y, x)| maps[*i][[y, x]] >= t).count();
            pro += hit as f64 / r.len() as f64;
        }
        curve.push((fp as f64 / negatives as f64, pro / regions.len() as f64));
    }
    let mut area = 0.0;
    for win in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (win[0], win[1]);
        if x0 >= limit {
            break;
        }
        let xe = x1.min(limit);
        let ye = if x1 > x0 {
            y0 + (y1 - y0) * (xe - x0) / (x1 - x0)
        } else {
            y1
        };
        area += (xe - x0) * (y0 + ye) / 2.0;
    }
    area / limit
}

/// Plain-text rendering of every prompt of every product of a knowledge base,
/// full roster first, then the filtered one.
pub fn render_prompts(kba: &multiads::kba::Kba, only: Option<(&str, bool)>) -> String {
    let mut out = String::new();
    for product in kba.products.keys() {
        for filtered in [false, true] {
            if let Some((p, f)) = only {
                if p != product || f != filtered {
                    continue;
                }
            }
            let label = if filtered { "filtered" } else { "full" };
            out.push_str(&format!("## {product} {label}\n"));
            for set in multiads::prompts::build_all(kba, product, filtered).unwrap() {
                out.push_str(&format!("# {}\n", set.state_id));
                for p in set.prompts {
                    out.push_str(&p);
                    out.push('\n');
                }
            }
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
