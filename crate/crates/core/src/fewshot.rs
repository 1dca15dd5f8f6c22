//! Memory-bank scoring: few-shot reference maps and the batched zero-shot
//! variant that scores each test patch against all other test patches.

use std::path::Path;

use ndarray::{concatenate, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::adapter::{project, AdapterParams};
use crate::binio::{read_file, Reader, Writer};
use crate::encoder::ImageEmbeddings;
use crate::error::{Error, Result};
use crate::infer::{image_decision, upsample, AnomalyMap, Decision, UpsampleMode};

pub const BANK_MAGIC: &[u8; 8] = b"MADSBNK1";
const VERSION: u32 = 1;
pub const DEFAULT_ALPHA: f64 = 0.99;
const UNIT_TOL: f64 = 1e-5;

/// Adapted unit-norm patch vectors per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    /// One count×N_z matrix per stage.
    pub stages: Vec<Array2<f64>>,
}

/// Adapted patches of one image as (h, w, (h·w)×N_z) per stage.
fn adapted_stages(
    emb: &ImageEmbeddings,
    params: &AdapterParams,
) -> Result<Vec<(usize, usize, Array2<f64>)>> {
    params.check_embeddings(emb)?;
    emb.stages
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let (h, w, _) = g.dim();
            let z = project(params, g.view(), i)?;
            let nz = z.dim().2;
            Ok((
                h,
                w,
                z.into_shape_with_order((h * w, nz))
                    .expect("row-major reshape"),
            ))
        })
        .collect()
}

impl MemoryBank {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.stages.first().map_or(0, |s| s.ncols())
    }

    pub fn len(&self, stage: usize) -> usize {
        self.stages[stage].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.iter().all(|s| s.nrows() == 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::EmptyReferences);
        }
        let nz = self.embed_dim();
        for (i, s) in self.stages.iter().enumerate() {
            if s.nrows() == 0 {
                return Err(Error::EmptyReferences);
            }
            if s.ncols() != nz {
                return Err(Error::ShapeMismatch(format!(
                    "bank stage {i} has width {}",
                    s.ncols()
                )));
            }
            for row in s.rows() {
                let n = row.dot(&row).sqrt();
                if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::Validation(format!(
                        "bank stage {i} holds a vector of norm {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(BANK_MAGIC);
        w.u32(VERSION);
        w.usize32(self.stage_count(), "stage count")?;
        w.usize32(self.embed_dim(), "N_z")?;
        for s in &self.stages {
            w.u64(s.nrows() as u64);
            w.f64s_as_f32(s.iter());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, BANK_MAGIC, "MADSBNK1")?;
        r.version(VERSION)?;
        let m = r.u32()? as usize;
        let nz = r.u32()? as usize;
        let mut stages = Vec::with_capacity(m);
        for _ in 0..m {
            let count = usize::try_from(r.u64()?)
                .map_err(|_| Error::Parse("MADSBNK1: count overflow".into()))?;
            let data = r.f32s_as_f64(
                count
                    .checked_mul(nz)
                    .ok_or_else(|| Error::Parse("MADSBNK1: size overflow".into()))?,
            )?;
            stages.push(Array2::from_shape_vec((count, nz), data).expect("length read"));
        }
        r.finish()?;
        let bank = MemoryBank { stages };
        bank.validate()?;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Projects and pools every patch of every reference image.
pub fn build_bank(refs: &[ImageEmbeddings], params: &AdapterParams) -> Result<MemoryBank> {
    if refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let per_image = refs
        .iter()
        .map(|r| adapted_stages(r, params))
        .collect::<Result<Vec<_>>>()?;
    let stages = (0..params.stage_count())
        .map(|i| {
            let views: Vec<ArrayView2<f64>> = per_image.iter().map(|img| img[i].2.view()).collect();
            concatenate(Axis(0), &views).expect("equal widths")
        })
        .collect();
    Ok(MemoryBank { stages })
}

fn to_grid(scores: Vec<f64>, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_vec((1, h, w), scores).expect("h·w scores")
}

/// Mean over stages of the up-sampled single-channel maps.
fn average_stage_maps(
    maps: Vec<Array3<f64>>,
    height: usize,
    width: usize,
    mode: UpsampleMode,
) -> Result<AnomalyMap> {
    let m = maps.len() as f64;
    let mut acc = Array2::<f64>::zeros((height, width));
    for map in maps {
        acc += &upsample(map.view(), height, width, mode)?.index_axis(Axis(0), 0);
    }
    acc /= m;
    Ok(AnomalyMap { scores: acc })
}

/// `1 − max cosine to the bank` per patch, up-sampled and averaged over stages.
pub fn reference_map(
    query: &ImageEmbeddings,
    bank: &MemoryBank,
    params: &AdapterParams,
    height: usize,
    width: usize,
    mode: UpsampleMode,
) -> Result<AnomalyMap> {
    bank.validate()?;
    if bank.stage_count() != params.stage_count() || bank.embed_dim() != params.embed_dim() {
        return Err(Error::ShapeMismatch(format!(
            "bank has {} stages of width {}, adapter {} of width {}",
            bank.stage_count(),
            bank.embed_dim(),
            params.stage_count(),
            params.embed_dim()
        )));
    }
    let maps = adapted_stages(query, params)?
        .into_iter()
        .zip(&bank.stages)
        .map(|((h, w, z), b)| {
            let sims = z.dot(&b.t());
            let scores = sims
                .rows()
                .into_iter()
                .map(|row| 1.0 - row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            to_grid(scores, h, w)
        })
        .collect();
    average_stage_maps(maps, height, width, mode)
}

pub fn final_map(zero_shot: &AnomalyMap, reference: &AnomalyMap) -> Result<AnomalyMap> {
    if zero_shot.scores.dim() != reference.scores.dim() {
        return Err(Error::ShapeMismatch(format!(
            "zero-shot map {:?} vs reference map {:?}",
            zero_shot.scores.dim(),
            reference.scores.dim()
        )));
    }
    Ok(AnomalyMap {
        scores: (&zero_shot.scores + &reference.scores) * 0.5,
    })
}

pub fn fewshot_decision(final_map: &AnomalyMap, a_x: f64, theta: f64) -> Decision {
    image_decision(final_map, a_x, theta)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "quantile level must lie in (0, 1), got {alpha}"
        )))
    }
}

/// Linear-interpolation quantile at position `alpha·(n−1)` of the sorted values.
/// Reorders `values`.
pub fn quantile(values: &mut [f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if values.is_empty() {
        return Err(Error::InsufficientBatch(0));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("quantile input".into()));
    }
    let pos = alpha * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut a, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return Ok(a);
    }
    let b = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(a + frac * (b - a))
}

/// Reference score of patch `own` against every other row of `bank`.
fn mutual_score(z: ArrayView1<f64>, own: usize, bank: &Array2<f64>, alpha: f64) -> Result<f64> {
    let mut sims: Vec<f64> = bank
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(j, _)| *j != own)
        .map(|(_, b)| b.dot(&z))
        .collect();
    Ok(1.0 - quantile(&mut sims, alpha)?)
}

/// Per-image batched reference maps: each patch scores `1 − q_α` of its
/// similarities to all other patches of the same stage across the test set.
pub fn batched_reference_maps(
    test_set: &[ImageEmbeddings],
    params: &AdapterParams,
    alpha: f64,
    height: usize,
    width: usize,
    mode: UpsampleMode,
) -> Result<Vec<AnomalyMap>> {
    check_alpha(alpha)?;
    if test_set.len() < 2 {
        return Err(Error::InsufficientBatch(test_set.len()));
    }
    let per_image = test_set
        .iter()
        .map(|e| adapted_stages(e, params))
        .collect::<Result<Vec<_>>>()?;
    let m = params.stage_count();
    // stage -> pooled bank and each image's row offset
    let mut banks = Vec::with_capacity(m);
    for i in 0..m {
        let views: Vec<ArrayView2<f64>> = per_image.iter().map(|img| img[i].2.view()).collect();
        banks.push(concatenate(Axis(0), &views).expect("equal widths"));
    }
    let mut per_stage_maps: Vec<Vec<Array3<f64>>> = vec![Vec::with_capacity(m); test_set.len()];
    for (i, bank) in banks.iter().enumerate() {
        let mut offset = 0;
        for (k, img) in per_image.iter().enumerate() {
            let (h, w, z) = &img[i];
            let scores = (0..z.nrows())
                .into_par_iter()
                .map(|p| mutual_score(z.row(p), offset + p, bank, alpha))
                .collect::<Result<Vec<_>>>()?;
            per_stage_maps[k].push(to_grid(scores, *h, *w));
            offset += z.nrows();
        }
    }
    per_stage_maps
        .into_iter()
        .map(|maps| average_stage_maps(maps, height, width, mode))
        .collect()
}

/// Batched reference maps fused with the zero-shot maps by the few-shot rule.
pub fn batched_scores(
    test_set: &[ImageEmbeddings],
    zero_shot: &[AnomalyMap],
    params: &AdapterParams,
    alpha: f64,
    mode: UpsampleMode,
) -> Result<Vec<AnomalyMap>> {
    if zero_shot.len() != test_set.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} zero-shot maps for {} images",
            zero_shot.len(),
            test_set.len()
        )));
    }
    let (height, width) = zero_shot.first().map_or((0, 0), |m| m.scores.dim());
    let refs = batched_reference_maps(test_set, params, alpha, height, width, mode)?;
    zero_shot
        .iter()
        .zip(&refs)
        .map(|(z, r)| final_map(z, r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::StageShape;
    use ndarray::array;

    fn shape(h: usize, w: usize, c: usize) -> StageShape {
        StageShape {
            height: h,
            width: w,
            channels: c,
        }
    }

    fn emb(grid: Array3<f32>) -> ImageEmbeddings {
        ImageEmbeddings {
            stages: vec![grid],
            global: vec![1.0, 0.0],
        }
    }

    #[test]
    fn bank_counts_patches() {
        let p = AdapterParams::init(&[shape(2, 2, 3)], 4, 0.07, 1).unwrap();
        let e = emb(Array3::from_shape_fn((2, 2, 3), |(y, x, c)| {
            (y + 2 * x + c) as f32 + 0.5
        }));
        let bank = build_bank(std::slice::from_ref(&e), &p).unwrap();
        assert_eq!(bank.len(0), 4);
        assert!(matches!(build_bank(&[], &p), Err(Error::EmptyReferences)));
        let wide = emb(Array3::from_elem((2, 2, 5), 1.0));
        assert!(matches!(
            build_bank(&[e, wide], &p),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn self_match_and_orthogonal_bank() {
        let p = AdapterParams::identity(&[shape(2, 2, 2)], 0.07).unwrap();
        let e = emb(Array3::from_shape_fn((2, 2, 2), |(y, x, c)| {
            if (y + x + c) % 2 == 0 {
                1.0
            } else {
                0.2
            }
        }));
        let bank = build_bank(std::slice::from_ref(&e), &p).unwrap();
        let r = reference_map(&e, &bank, &p, 2, 2, UpsampleMode::Bilinear).unwrap();
        assert!(r.scores.iter().all(|v| v.abs() < 1e-6));

        let q = emb(Array3::from_shape_fn((2, 2, 2), |(_, _, c)| {
            if c == 0 {
                1.0
            } else {
                0.0
            }
        }));
        let ortho = MemoryBank {
            stages: vec![array![[0.0, 1.0]]],
        };
        let r = reference_map(&q, &ortho, &p, 2, 2, UpsampleMode::Bilinear).unwrap();
        assert!(r.scores.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hand_chosen_cosines() {
        let p = AdapterParams::identity(&[shape(1, 1, 2)], 0.07).unwrap();
        let q = emb(array![[[1.0f32, 0.0]]]);
        let c3 = (1.0f64 - 0.09).sqrt();
        let bank = MemoryBank {
            stages: vec![array![[0.8, 0.6], [0.3, c3]]],
        };
        let r = reference_map(&q, &bank, &p, 1, 1, UpsampleMode::Bilinear).unwrap();
        assert!((r.scores[[0, 0]] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn final_map_examples() {
        let z = AnomalyMap {
            scores: array![[0.4, 0.2]],
        };
        let zero = AnomalyMap {
            scores: Array2::zeros((1, 2)),
        };
        assert_eq!(final_map(&z, &zero).unwrap().scores, array![[0.2, 0.1]]);
        assert_eq!(final_map(&z, &z).unwrap(), z);
        let r = AnomalyMap {
            scores: array![[0.8, 0.2]],
        };
        assert!((final_map(&z, &r).unwrap().scores[[0, 0]] - 0.6).abs() < 1e-15);
        assert!(final_map(
            &z,
            &AnomalyMap {
                scores: Array2::zeros((2, 1))
            }
        )
        .is_err());
    }

    #[test]
    fn fewshot_decision_boundaries() {
        let zero = AnomalyMap {
            scores: Array2::zeros((2, 2)),
        };
        let d = fewshot_decision(&zero, 0.0, 0.1);
        assert_eq!(d.score, 0.0);
        assert!(!d.is_anomalous);
        let small = AnomalyMap {
            scores: array![[0.01]],
        };
        assert!(fewshot_decision(&small, 0.0, 0.0).is_anomalous);
    }

    #[test]
    fn quantile_by_hand() {
        assert_eq!(quantile(&mut [0.9, 0.5, 0.1], 0.5).unwrap(), 0.5);
        // pos = 0.25·2 = 0.5 between 0.1 and 0.5
        assert!((quantile(&mut [0.9, 0.5, 0.1], 0.25).unwrap() - 0.3).abs() < 1e-15);
        assert!(quantile(&mut [0.9, 0.5, 0.1], 1.0).is_err());
        assert!(quantile(&mut [0.9, 0.5, 0.1], 0.0).is_err());
    }

    #[test]
    fn batched_needs_two_images() {
        let p = AdapterParams::identity(&[shape(1, 1, 2)], 0.07).unwrap();
        let e = emb(array![[[1.0f32, 0.0]]]);
        assert!(matches!(
            batched_reference_maps(&[e], &p, 0.5, 1, 1, UpsampleMode::Bilinear),
            Err(Error::InsufficientBatch(1))
        ));
    }

    #[test]
    fn bank_file_round_trip() {
        let bank = MemoryBank {
            stages: vec![array![[0.6, 0.8], [1.0, 0.0]], array![[0.0, 1.0]]],
        };
        let bytes = bank.to_bytes().unwrap();
        let back = MemoryBank::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.stages[0]
            .iter()
            .zip(bank.stages[0].iter())
            .all(|(a, b)| (a - b).abs() < 1e-7));
    }
}
