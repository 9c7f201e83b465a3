//! Dense 2D scene flow induced by a depth map and a relative pose.

use nalgebra::Vector2;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::map::{mask_cell, DenseMap};

/// Per-pixel flow on the source grid. `omega[i]` marks pixels whose warp lands
/// on a sampleable location of the target mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub omega: Vec<bool>,
}

impl Flow {
    pub fn omega_count(&self) -> usize {
        self.omega.iter().filter(|&&o| o).count()
    }

    pub fn at(&self, index: usize) -> Vector2<f64> {
        Vector2::new(self.u[index], self.v[index])
    }
}

/// `W(x) = pi(T * pi^-1(x, D(x))) - x` over the mask of `src_depth`.
///
/// `rel` maps source camera coordinates into target camera coordinates.
pub fn compute_flow(cam: &Camera, src_depth: &DenseMap, tgt_mask: &[bool], rel: &Pose) -> Result<Flow> {
    let (h, w) = (src_depth.height(), src_depth.width());
    if tgt_mask.len() != h * w {
        return Err(Error::DimensionMismatch {
            expected: h * w,
            actual: tgt_mask.len(),
        });
    }
    let n = h * w;
    let mut flow = Flow {
        height: h,
        width: w,
        u: vec![0.0; n],
        v: vec![0.0; n],
        omega: vec![false; n],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !src_depth.mask()[i] {
                continue;
            }
            let d = src_depth.at_index(0, i);
            if d <= 0.0 {
                continue;
            }
            let p = rel.transform_point(&(cam.ray(x as f64, y as f64) * d));
            if p.z <= 0.0 {
                continue;
            }
            let q = cam.project_unchecked(&p);
            flow.u[i] = q.x - x as f64;
            flow.v[i] = q.y - y as f64;
            flow.omega[i] = mask_cell(tgt_mask, h, w, q.x, q.y).is_some();
        }
    }
    if flow.omega_count() == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(flow)
}

/// Mean flow norm over `omega`.
pub fn mean_flow_magnitude(flow: &Flow) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..flow.omega.len() {
        if flow.omega[i] {
            sum += flow.u[i].hypot(flow.v[i]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(sum / n as f64)
}
