//! Trajectory alignment and the trajectory and depth error metrics.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{so3_log, umeyama, Pose, Similarity};
use crate::map::DenseMap;

pub const DEFAULT_RPE_INTERVAL: usize = 7;
pub const DEFAULT_THRESHOLDS: [f64; 2] = [1.25, 1.5625];

/// Camera-to-world poses keyed by strictly increasing frame ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(usize, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(usize, Pose)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "trajectory ids must be strictly increasing ({} after {})",
                    w[1].0, w[0].0
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Pose> {
        self.entries
            .binary_search_by_key(&id, |e| e.0)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.entries.iter().map(|e| e.1).collect()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

/// Id-synchronized pair of trajectories with the estimate mapped onto the
/// reference by `transform`.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub ids: Vec<usize>,
    pub est: Vec<Pose>,
    pub gt: Vec<Pose>,
    pub transform: Similarity,
}

/// Pairs poses by id, fits the least-squares similarity on camera centres and
/// applies it to the estimate.
pub fn sync_and_align(est: &Trajectory, gt: &Trajectory) -> Result<Alignment> {
    let mut ids = Vec::new();
    let mut e = Vec::new();
    let mut g = Vec::new();
    for (id, pose) in est.entries() {
        if let Some(q) = gt.get(*id) {
            ids.push(*id);
            e.push(*pose);
            g.push(*q);
        }
    }
    if ids.len() < 3 {
        return Err(Error::InsufficientCorrespondences {
            needed: 3,
            have: ids.len(),
        });
    }
    let src: Vec<Vector3<f64>> = e.iter().map(|p| p.translation).collect();
    let dst: Vec<Vector3<f64>> = g.iter().map(|p| p.translation).collect();
    let transform = umeyama(&src, &dst, true)
        .ok_or_else(|| Error::Config("degenerate trajectory: camera centres coincide".into()))?;
    let est = e.iter().map(|p| transform.apply_pose(p)).collect();
    Ok(Alignment {
        ids,
        est,
        gt: g,
        transform,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError {
    /// Degrees.
    pub rot: f64,
    pub trans: f64,
}

fn rmse(sum_sq: f64, n: usize) -> f64 {
    (sum_sq / n as f64).sqrt()
}

/// RMSE of the rotation angle of `R_gt R_est^T` and of `|t_gt - R_gt R_est^T t_est|`.
pub fn ate(est: &[Pose], gt: &[Pose]) -> Result<PoseError> {
    if est.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            actual: est.len(),
        });
    }
    if est.is_empty() {
        return Err(Error::InsufficientCorrespondences { needed: 1, have: 0 });
    }
    let (mut sr, mut st) = (0.0, 0.0);
    for (e, g) in est.iter().zip(gt) {
        let r = g.rotation * e.rotation.transpose();
        let a = so3_log(&r).norm().to_degrees();
        let t = (g.translation - r * e.translation).norm();
        sr += a * a;
        st += t * t;
    }
    Ok(PoseError {
        rot: rmse(sr, est.len()),
        trans: rmse(st, est.len()),
    })
}

/// RMSE over `i` of `((G_i^-1 G_{i+d})^-1 (E_i^-1 E_{i+d}))`.
pub fn rpe(est: &[Pose], gt: &[Pose], delta: usize) -> Result<PoseError> {
    if est.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            actual: est.len(),
        });
    }
    if delta == 0 {
        return Err(Error::Config("RPE interval must be positive".into()));
    }
    let n = est.len();
    if n <= delta {
        return Err(Error::InsufficientCorrespondences {
            needed: delta + 1,
            have: n,
        });
    }
    let (mut sr, mut st) = (0.0, 0.0);
    for i in 0..n - delta {
        let dg = gt[i].inverse() * gt[i + delta];
        let de = est[i].inverse() * est[i + delta];
        let d = dg.inverse() * de;
        let a = so3_log(&d.rotation).norm().to_degrees();
        let t = d.translation.norm();
        sr += a * a;
        st += t * t;
    }
    Ok(PoseError {
        rot: rmse(sr, n - delta),
        trans: rmse(st, n - delta),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthScaling {
    /// Multiply every estimate by the trajectory alignment scale.
    Trajectory(f64),
    /// Per frame, multiply by the median of `gt / est` over the valid region.
    Median,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMetrics {
    pub ard: f64,
    /// `(theta, fraction)` in the order requested.
    pub thresholds: Vec<(f64, f64)>,
    pub frames_used: usize,
}

impl DepthMetrics {
    pub fn threshold(&self, theta: f64) -> Option<f64> {
        self.thresholds.iter().find(|t| t.0 == theta).map(|t| t.1)
    }
}

/// Neumaier-compensated running sum, so that means of equal terms are exact.
#[derive(Default)]
struct Sum {
    sum: f64,
    comp: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// ARD and threshold accuracy, each averaged over frames of per-frame means.
///
/// The valid region of a frame is where both masks are set and both depths
/// are positive; frames with an empty region are skipped.
pub fn depth_metrics(est: &[DenseMap], gt: &[DenseMap], scaling: DepthScaling, thetas: &[f64]) -> Result<DepthMetrics> {
    if est.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            actual: est.len(),
        });
    }
    if let DepthScaling::Trajectory(s) = scaling {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("trajectory scale must be positive, got {s}")));
        }
    }
    let mut ard = Sum::default();
    let mut fr = vec![0.0; thetas.len()];
    let mut used = 0usize;
    for (e, g) in est.iter().zip(gt) {
        if e.plane_len() != g.plane_len() {
            return Err(Error::DimensionMismatch {
                expected: g.plane_len(),
                actual: e.plane_len(),
            });
        }
        let (ed, gd) = (e.channel(0), g.channel(0));
        let valid: Vec<usize> = (0..g.plane_len())
            .filter(|&i| e.mask()[i] && g.mask()[i] && ed[i] > 0.0 && gd[i] > 0.0)
            .collect();
        if valid.is_empty() {
            continue;
        }
        let s = match scaling {
            DepthScaling::Trajectory(s) => s,
            DepthScaling::Median => median(&mut valid.iter().map(|&i| gd[i] / ed[i]).collect::<Vec<_>>()),
        };
        let n = valid.len() as f64;
        let mut a = Sum::default();
        let mut hits = vec![0usize; thetas.len()];
        for &i in &valid {
            let d = s * ed[i];
            a.add((d - gd[i]).abs() / gd[i]);
            let r = (d / gd[i]).max(gd[i] / d);
            for (h, &t) in hits.iter_mut().zip(thetas) {
                if r < t {
                    *h += 1;
                }
            }
        }
        ard.add(a.value() / n);
        for (f, h) in fr.iter_mut().zip(&hits) {
            *f += *h as f64 / n;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(DepthMetrics {
        ard: ard.value() / used as f64,
        thresholds: thetas.iter().zip(&fr).map(|(&t, &f)| (t, f / used as f64)).collect(),
        frames_used: used,
    })
}
