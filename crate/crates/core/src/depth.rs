//! Compact depth model `D = s * (avg + c . bases)`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::map::{subsample, DenseMap};

/// Composed depths are clamped to this floor inside factor evaluation.
pub const DEPTH_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthPrior {
    average: DenseMap,
    bases: DenseMap,
    pub code: DVector<f64>,
    pub scale: f64,
}

impl DepthPrior {
    /// `average` is a one-channel map whose mask is the valid region; `bases`
    /// holds one channel per basis.
    pub fn new(average: DenseMap, bases: DenseMap, code: DVector<f64>, scale: f64) -> Result<Self> {
        if average.channels() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: average.channels(),
            });
        }
        if bases.height() != average.height() || bases.width() != average.width() {
            return Err(Error::DimensionMismatch {
                expected: average.plane_len(),
                actual: bases.plane_len(),
            });
        }
        if code.len() != bases.channels() {
            return Err(Error::DimensionMismatch {
                expected: bases.channels(),
                actual: code.len(),
            });
        }
        if !(scale > 0.0) {
            return Err(Error::Domain(scale));
        }
        Ok(Self {
            average,
            bases,
            code,
            scale,
        })
    }

    pub fn average(&self) -> &DenseMap {
        &self.average
    }
    pub fn bases(&self) -> &DenseMap {
        &self.bases
    }
    pub fn mask(&self) -> &[bool] {
        self.average.mask()
    }
    pub fn basis_count(&self) -> usize {
        self.bases.channels()
    }
    pub fn height(&self) -> usize {
        self.average.height()
    }
    pub fn width(&self) -> usize {
        self.average.width()
    }

    /// Unclamped `s * (avg + c . bases)` at a flat pixel index.
    #[inline]
    pub fn compose_with(&self, index: usize, scale: f64, code: &DVector<f64>) -> f64 {
        let mut d = self.average.at_index(0, index);
        for (j, cj) in code.iter().enumerate() {
            d += cj * self.bases.at_index(j, index);
        }
        scale * d
    }

    /// Depth at integer pixel `(x, y)` with the stored code and scale.
    pub fn compose_at(&self, x: usize, y: usize) -> Result<f64> {
        let index = y * self.width() + x;
        let d = self.compose_with(index, self.scale, &self.code);
        if d <= 0.0 {
            return Err(Error::DegenerateDepth { index, depth: d });
        }
        Ok(d)
    }

    /// Full composed map with the prior's mask; fails on any non-positive
    /// depth inside the mask.
    pub fn compose_map(&self) -> Result<DenseMap> {
        self.compose_map_with(self.scale, &self.code)
    }

    pub fn compose_map_with(&self, scale: f64, code: &DVector<f64>) -> Result<DenseMap> {
        let n = self.average.plane_len();
        let mut data = vec![0.0; n];
        for (i, d) in data.iter_mut().enumerate() {
            if !self.mask()[i] {
                continue;
            }
            let v = self.compose_with(i, scale, code);
            if v <= 0.0 {
                return Err(Error::DegenerateDepth { index: i, depth: v });
            }
            *d = v;
        }
        DenseMap::new(1, self.height(), self.width(), data, self.mask().to_vec())
    }

    /// Composed map with depths clamped to [`DEPTH_FLOOR`].
    pub fn compose_clamped(&self, scale: f64, code: &DVector<f64>) -> DenseMap {
        let n = self.average.plane_len();
        let data = (0..n)
            .map(|i| {
                if self.mask()[i] {
                    self.compose_with(i, scale, code).max(DEPTH_FLOOR)
                } else {
                    0.0
                }
            })
            .collect();
        DenseMap::new(1, self.height(), self.width(), data, self.mask().to_vec()).expect("sizes are consistent")
    }

    /// Mean of the average depth over the mask.
    pub fn mean_average(&self) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, &m) in self.mask().iter().enumerate() {
            if m {
                sum += self.average.at_index(0, i);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Prior for pyramid level `level`: every `2^level`-th pixel, no smoothing.
    pub fn at_level(&self, level: usize) -> DepthPrior {
        DepthPrior {
            average: subsample(&self.average, level),
            bases: subsample(&self.bases, level),
            code: self.code.clone(),
            scale: self.scale,
        }
    }
}
