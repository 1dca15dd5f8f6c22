//! Channelwise resampling of C×h×w maps to C×H×W.
//!
//! Bilinear uses half-pixel centers (no corner alignment), with source
//! coordinates clamped to the grid. The operator is linear, so its transpose
//! ([`Resampler::backward`]) carries gradients back to the coarse grid.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Interpolation taps along one axis: (i0, i1, w0, w1).
#[derive(Debug, Clone)]
struct AxisTaps(Vec<(usize, usize, f64, f64)>);

impl AxisTaps {
    fn bilinear(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        AxisTaps(
            (0..dst)
                .map(|d| {
                    let x = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (x.floor() as usize).min(src - 1);
                    let i1 = (i0 + 1).min(src - 1);
                    let frac = if i1 == i0 { 0.0 } else { x - i0 as f64 };
                    (i0, i1, 1.0 - frac, frac)
                })
                .collect(),
        )
    }

    fn nearest(src: usize, dst: usize) -> Self {
        AxisTaps(
            (0..dst)
                .map(|d| {
                    let i = ((d * src) / dst).min(src - 1);
                    (i, i, 1.0, 0.0)
                })
                .collect(),
        )
    }
}

/// Precomputed resampling plan for one (h, w) → (H, W) pair.
#[derive(Debug, Clone)]
pub struct Resampler {
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisTaps,
    cols: AxisTaps,
}

impl Resampler {
    pub fn new(src: (usize, usize), dst: (usize, usize), mode: UpsampleMode) -> Result<Self> {
        let (h, w) = src;
        let (hh, ww) = dst;
        if h == 0 || w == 0 || hh < h || ww < w {
            return Err(Error::ShapeMismatch(format!(
                "cannot upsample {h}×{w} to {hh}×{ww}"
            )));
        }
        let (rows, cols) = match mode {
            UpsampleMode::Bilinear => (AxisTaps::bilinear(h, hh), AxisTaps::bilinear(w, ww)),
            UpsampleMode::Nearest => (AxisTaps::nearest(h, hh), AxisTaps::nearest(w, ww)),
        };
        Ok(Resampler {
            src,
            dst,
            rows,
            cols,
        })
    }

    pub fn dst(&self) -> (usize, usize) {
        self.dst
    }

    pub fn forward_2d(&self, map: ArrayView2<f64>) -> Array2<f64> {
        let (h, _) = self.src;
        let (hh, ww) = self.dst;
        // columns first: h×W
        let mut tmp = Array2::<f64>::zeros((h, ww));
        for y in 0..h {
            for (x, &(c0, c1, w0, w1)) in self.cols.0.iter().enumerate() {
                tmp[[y, x]] = w0 * map[[y, c0]] + w1 * map[[y, c1]];
            }
        }
        let mut out = Array2::<f64>::zeros((hh, ww));
        for (y, &(r0, r1, w0, w1)) in self.rows.0.iter().enumerate() {
            for x in 0..ww {
                out[[y, x]] = w0 * tmp[[r0, x]] + w1 * tmp[[r1, x]];
            }
        }
        out
    }

    /// Transpose of [`forward_2d`](Self::forward_2d).
    pub fn backward_2d(&self, grad: ArrayView2<f64>) -> Array2<f64> {
        let (h, w) = self.src;
        let (_, ww) = self.dst;
        let mut tmp = Array2::<f64>::zeros((h, ww));
        for (y, &(r0, r1, w0, w1)) in self.rows.0.iter().enumerate() {
            for x in 0..ww {
                let g = grad[[y, x]];
                tmp[[r0, x]] += w0 * g;
                tmp[[r1, x]] += w1 * g;
            }
        }
        let mut out = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for (x, &(c0, c1, w0, w1)) in self.cols.0.iter().enumerate() {
                let g = tmp[[y, x]];
                out[[y, c0]] += w0 * g;
                out[[y, c1]] += w1 * g;
            }
        }
        out
    }

    pub fn forward(&self, map: ArrayView3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = map.dim();
        if (h, w) != self.src {
            return Err(Error::ShapeMismatch(format!(
                "map is {h}×{w}, resampler expects {}×{}",
                self.src.0, self.src.1
            )));
        }
        let (hh, ww) = self.dst;
        let mut out = Array3::<f64>::zeros((c, hh, ww));
        for k in 0..c {
            out.index_axis_mut(ndarray::Axis(0), k)
                .assign(&self.forward_2d(map.index_axis(ndarray::Axis(0), k)));
        }
        Ok(out)
    }

    pub fn backward(&self, grad: ArrayView3<f64>) -> Array3<f64> {
        let (c, _, _) = grad.dim();
        let (h, w) = self.src;
        let mut out = Array3::<f64>::zeros((c, h, w));
        for k in 0..c {
            out.index_axis_mut(ndarray::Axis(0), k)
                .assign(&self.backward_2d(grad.index_axis(ndarray::Axis(0), k)));
        }
        out
    }
}

/// Resamples a C×h×w map to C×H×W.
pub fn upsample(
    map: ArrayView3<f64>,
    height: usize,
    width: usize,
    mode: UpsampleMode,
) -> Result<Array3<f64>> {
    let (_, h, w) = map.dim();
    Resampler::new((h, w), (height, width), mode)?.forward(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Independent closed-form bilinear sample at output pixel (y, x).
    fn oracle(map: &Array2<f64>, hh: usize, ww: usize, y: usize, x: usize) -> f64 {
        let (h, w) = map.dim();
        let sy = (((y as f64 + 0.5) * h as f64 / hh as f64) - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = (((x as f64 + 0.5) * w as f64 / ww as f64) - 0.5).clamp(0.0, (w - 1) as f64);
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                let wy = (1.0 - (sy - i as f64).abs()).max(0.0);
                let wx = (1.0 - (sx - j as f64).abs()).max(0.0);
                acc += wy * wx * map[[i, j]];
            }
        }
        acc
    }

    #[test]
    fn identity_when_sizes_match() {
        let m = array![[[0.1, 0.2], [0.3, 0.4]]];
        let out = upsample(m.view(), 2, 2, UpsampleMode::Bilinear).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn constant_stays_constant() {
        let m = Array3::from_elem((2, 3, 4), 0.37);
        let out = upsample(m.view(), 17, 29, UpsampleMode::Bilinear).unwrap();
        assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_to_two_by_four() {
        let m = array![[0.0, 1.0], [0.0, 1.0]];
        let out = Resampler::new((2, 2), (2, 4), UpsampleMode::Bilinear)
            .unwrap()
            .forward_2d(m.view());
        let expected = [0.0, 0.25, 0.75, 1.0];
        for y in 0..2 {
            for x in 0..4 {
                assert!((out[[y, x]] - expected[x]).abs() < 1e-6);
                assert!((out[[y, x]] - oracle(&m, 2, 4, y, x)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matches_oracle_on_odd_sizes() {
        let m = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.21);
        let out = Resampler::new((3, 5), (11, 13), UpsampleMode::Bilinear)
            .unwrap()
            .forward_2d(m.view());
        for y in 0..11 {
            for x in 0..13 {
                assert!((out[[y, x]] - oracle(&m, 11, 13, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        let r = Resampler::new((3, 4), (7, 9), UpsampleMode::Bilinear).unwrap();
        let a = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - 1.3) * (j as f64 + 0.4));
        let g = Array2::from_shape_fn((7, 9), |(i, j)| ((i * 9 + j) as f64).sin());
        let lhs: f64 = (&r.forward_2d(a.view()) * &g).sum();
        let rhs: f64 = (&a * &r.backward_2d(g.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn downsampling_is_rejected() {
        assert!(Resampler::new((4, 4), (2, 8), UpsampleMode::Bilinear).is_err());
    }

    #[test]
    fn nearest_repeats_cells() {
        let m = array![[[1.0, 2.0]]];
        let out = upsample(m.view(), 2, 4, UpsampleMode::Nearest).unwrap();
        assert_eq!(out, array![[[1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]]]);
    }
}
