//! Per-frame data shared by tracking, factors and keyframes.

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::depth::DepthPrior;
use crate::error::{Error, Result};
use crate::map::{build_pyramid, DenseMap, FeaturePyramid, GaussianKernel};

/// Source-side data of one pyramid level.
#[derive(Clone, Debug)]
pub struct FrameLevel {
    pub camera: Camera,
    pub prior: DepthPrior,
    /// Flat indices of pixels usable as warp sources at this level.
    pub pixels: Vec<usize>,
    /// Unit-z viewing rays for `pixels`.
    pub rays: Vec<Vector3<f64>>,
}

/// A frame with its depth prior, feature pyramid, descriptor map and mask.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: usize,
    pub camera: Camera,
    pub prior: DepthPrior,
    pub features: FeaturePyramid,
    pub descriptors: DenseMap,
    pub levels: Vec<FrameLevel>,
    mean_average: f64,
}

impl Frame {
    /// The video mask is taken from the prior; it is applied to the feature and
    /// descriptor maps.
    pub fn new(
        id: usize,
        camera: Camera,
        prior: DepthPrior,
        features: DenseMap,
        descriptors: DenseMap,
        level_count: usize,
    ) -> Result<Self> {
        let (h, w) = (prior.height(), prior.width());
        for (mh, mw) in [
            (features.height(), features.width()),
            (descriptors.height(), descriptors.width()),
            (camera.height, camera.width),
        ] {
            if (mh, mw) != (h, w) {
                return Err(Error::DimensionMismatch {
                    expected: h * w,
                    actual: mh * mw,
                });
            }
        }
        let mask = prior.mask().to_vec();
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        let features = features.with_mask(mask.clone())?;
        let descriptors = descriptors.with_mask(mask)?;
        let features = build_pyramid(&features, level_count, GaussianKernel::default())?;
        let levels = (0..level_count)
            .map(|l| {
                let camera = camera.at_level(l);
                let prior = prior.at_level(l);
                let fmask = features.level(l).mask();
                let mut pixels = Vec::new();
                let mut rays = Vec::new();
                for (i, (&a, &b)) in fmask.iter().zip(prior.mask()).enumerate() {
                    if a && b {
                        pixels.push(i);
                        rays.push(camera.ray((i % camera.width) as f64, (i / camera.width) as f64));
                    }
                }
                FrameLevel {
                    camera,
                    prior,
                    pixels,
                    rays,
                }
            })
            .collect();
        let mean_average = prior.mean_average();
        Ok(Self {
            id,
            camera,
            prior,
            features,
            descriptors,
            levels,
            mean_average,
        })
    }

    pub fn mask(&self) -> &[bool] {
        self.prior.mask()
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn basis_count(&self) -> usize {
        self.prior.basis_count()
    }

    /// Mean of the average depth over the mask, the unit of the depth-space
    /// robust bounds.
    pub fn mean_average_depth(&self) -> f64 {
        self.mean_average
    }
}
