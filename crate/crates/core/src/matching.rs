//! Descriptor matching, similarity-RANSAC outlier filtering and the overlap
//! diagnostics used for keyframing and loop verification.

use nalgebra::{DVector, Vector2, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::depth::DEPTH_FLOOR;
use crate::error::{Error, Result};
use crate::flow::{compute_flow, mean_flow_magnitude, Flow};
use crate::frame::Frame;
use crate::geometry::{umeyama, Pose, Similarity};
use crate::map::DenseMap;

/// Matched pixel locations `(x_src, x_tgt)` on the full-resolution grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<(Vector2<f64>, Vector2<f64>)>,
    /// Number of candidates before any filtering.
    pub candidate_count: usize,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchConfig {
    /// Maximum number of candidates kept, best first.
    pub max_candidates: usize,
    /// Spacing of the keypoint grid in pixels.
    pub grid_stride: usize,
    /// Refine target locations to sub-pixel accuracy.
    pub refine: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_candidates: 256,
            grid_stride: 2,
            refine: true,
        }
    }
}

fn grid_points(map: &DenseMap, stride: usize) -> Vec<usize> {
    let w = map.width();
    let mut out = Vec::new();
    for y in (0..map.height()).step_by(stride) {
        for x in (0..w).step_by(stride) {
            if map.is_valid(y, x) {
                out.push(y * w + x);
            }
        }
    }
    out
}

fn descriptor_at(map: &DenseMap, index: usize) -> Vec<f64> {
    (0..map.channels()).map(|c| map.at_index(c, index)).collect()
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// index into `cands` of the nearest descriptor; ties go to the lower index
fn nearest(query: &[f64], cands: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in cands.iter().enumerate() {
        let d = dist2(query, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Mutual nearest neighbours between the keypoint grids of two descriptor
/// maps, as `(src index, tgt index, squared distance)` sorted by distance.
pub fn mutual_nearest_neighbors(src: &DenseMap, tgt: &DenseMap, stride: usize) -> Result<Vec<(usize, usize, f64)>> {
    if src.channels() != tgt.channels() {
        return Err(Error::DimensionMismatch {
            expected: src.channels(),
            actual: tgt.channels(),
        });
    }
    let (gs, gt) = (grid_points(src, stride.max(1)), grid_points(tgt, stride.max(1)));
    if gs.is_empty() || gt.is_empty() {
        return Ok(Vec::new());
    }
    let ds: Vec<_> = gs.iter().map(|&i| descriptor_at(src, i)).collect();
    let dt: Vec<_> = gt.iter().map(|&i| descriptor_at(tgt, i)).collect();
    let fwd: Vec<(usize, f64)> = ds.par_iter().map(|d| nearest(d, &dt)).collect();
    let bwd: Vec<(usize, f64)> = dt.par_iter().map(|d| nearest(d, &ds)).collect();
    let mut out: Vec<_> = fwd
        .iter()
        .enumerate()
        .filter(|&(i, &(j, _))| bwd[j].0 == i)
        .map(|(i, &(j, d))| (gs[i], gt[j], d))
        .collect();
    out.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    Ok(out)
}

// Sub-pixel target location: best pixel in the 3x3 neighbourhood, then a
// separable parabola fit of the descriptor distance.
fn refine_target(desc: &[f64], tgt: &DenseMap, index: usize) -> Vector2<f64> {
    let (w, h) = (tgt.width() as isize, tgt.height() as isize);
    let (x0, y0) = ((index as isize) % w, (index as isize) / w);
    let d_at = |x: isize, y: isize| -> Option<f64> {
        if x < 0 || y < 0 || x >= w || y >= h || !tgt.is_valid(y as usize, x as usize) {
            return None;
        }
        Some(dist2(desc, &descriptor_at(tgt, (y * w + x) as usize)))
    };
    let mut best = (x0, y0, d_at(x0, y0).unwrap_or(f64::INFINITY));
    for dy in -1..=1 {
        for dx in -1..=1 {
            if let Some(d) = d_at(x0 + dx, y0 + dy) {
                if d < best.2 {
                    best = (x0 + dx, y0 + dy, d);
                }
            }
        }
    }
    let (bx, by, d0) = best;
    let offset = |m: Option<f64>, p: Option<f64>| match (m, p) {
        (Some(m), Some(p)) => {
            let curv = m - 2.0 * d0 + p;
            if curv > 0.0 {
                (0.5 * (m - p) / curv).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    let ox = offset(d_at(bx - 1, by), d_at(bx + 1, by));
    let oy = offset(d_at(bx, by - 1), d_at(bx, by + 1));
    Vector2::new(bx as f64 + ox, by as f64 + oy)
}

/// Up to `max_candidates` mutual-nearest-neighbour matches, best first.
pub fn match_descriptors(src: &DenseMap, tgt: &DenseMap, cfg: &MatchConfig) -> Result<MatchSet> {
    let mut mnn = mutual_nearest_neighbors(src, tgt, cfg.grid_stride)?;
    mnn.truncate(cfg.max_candidates);
    let w = src.width();
    let tw = tgt.width();
    let pairs: Vec<_> = mnn
        .par_iter()
        .map(|&(is, it, _)| {
            let xs = Vector2::new((is % w) as f64, (is / w) as f64);
            let xt = if cfg.refine {
                refine_target(&descriptor_at(src, is), tgt, it)
            } else {
                Vector2::new((it % tw) as f64, (it / tw) as f64)
            };
            (xs, xt)
        })
        .collect();
    Ok(MatchSet {
        candidate_count: pairs.len(),
        pairs,
    })
}

/// Bilinear depth at a (possibly fractional) pixel of a one-channel map.
pub fn sample_depth(depth: &DenseMap, x: &Vector2<f64>) -> Option<f64> {
    let cell = depth.cell(x.x, x.y)?;
    let d = depth.sample_channel(0, &cell);
    (d > DEPTH_FLOOR).then_some(d)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Stop early once this fraction of matches agrees with a hypothesis.
    pub early_exit_ratio: f64,
    pub noise_mult: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            early_exit_ratio: 0.8,
            noise_mult: 2.0,
        }
    }
}

/// Keeps the matches consistent with one similarity transform between the
/// lifted source and target points. The inlier bound is
/// `noise_mult * median source depth / focal length`.
pub fn filter_matches_3d<R: Rng>(
    m: &MatchSet,
    src_depth: &DenseMap,
    tgt_depth: &DenseMap,
    cam: &Camera,
    cfg: &RansacConfig,
    rng: &mut R,
) -> Result<(MatchSet, Similarity)> {
    let mut kept = Vec::new();
    let mut ps = Vec::new();
    let mut pt = Vec::new();
    for pair in &m.pairs {
        if let (Some(ds), Some(dt)) = (sample_depth(src_depth, &pair.0), sample_depth(tgt_depth, &pair.1)) {
            kept.push(*pair);
            ps.push(cam.ray(pair.0.x, pair.0.y) * ds);
            pt.push(cam.ray(pair.1.x, pair.1.y) * dt);
        }
    }
    let n = kept.len();
    if n < 3 {
        return Err(Error::InsufficientCorrespondences { needed: 3, have: n });
    }
    let bound = cfg.noise_mult * median(ps.iter().map(|p| p.z).collect()) * cam.pixel_angle();
    let inliers_of =
        |s: &Similarity| -> Vec<usize> { (0..n).filter(|&i| (s.apply(&ps[i]) - pt[i]).norm() < bound).collect() };
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..cfg.iterations {
        let idx = sample(rng, n, 3);
        let a: Vec<Vector3<f64>> = idx.iter().map(|i| ps[i]).collect();
        let b: Vec<Vector3<f64>> = idx.iter().map(|i| pt[i]).collect();
        let Some(s) = umeyama(&a, &b, true) else {
            continue;
        };
        if !(s.scale > 0.0) || !s.scale.is_finite() {
            continue;
        }
        let inl = inliers_of(&s);
        if inl.len() > best.len() {
            best = inl;
            if best.len() as f64 >= cfg.early_exit_ratio * n as f64 {
                break;
            }
        }
    }
    if best.len() < 3 {
        return Err(Error::InsufficientCorrespondences {
            needed: 3,
            have: best.len(),
        });
    }
    let fit = |set: &[usize]| {
        let a: Vec<_> = set.iter().map(|&i| ps[i]).collect();
        let b: Vec<_> = set.iter().map(|&i| pt[i]).collect();
        umeyama(&a, &b, true)
    };
    let mut sim = fit(&best).ok_or(Error::InsufficientCorrespondences { needed: 3, have: 0 })?;
    let refit = inliers_of(&sim);
    if refit.len() >= 3 {
        if let Some(s) = fit(&refit) {
            // only keep the refit if every returned match stays within the bound
            let check = inliers_of(&s);
            if check.len() >= refit.len() {
                sim = s;
                best = check;
            } else {
                best = refit;
            }
        }
    }
    let best: Vec<usize> = best
        .into_iter()
        .filter(|&i| (sim.apply(&ps[i]) - pt[i]).norm() < bound)
        .collect();
    Ok((
        MatchSet {
            pairs: best.iter().map(|&i| kept[i]).collect(),
            candidate_count: m.candidate_count,
        },
        sim,
    ))
}

/// `|filtered| / candidate_count`, or 0 without candidates.
pub fn inlier_ratio(filtered: &MatchSet, candidates: &MatchSet) -> f64 {
    if candidates.candidate_count == 0 {
        0.0
    } else {
        filtered.len() as f64 / candidates.candidate_count as f64
    }
}

/// Depth state `(scale, code)` of a frame.
pub type DepthState<'a> = (f64, &'a DVector<f64>);

/// Area overlap `|Omega| / |src mask|` and the fraction of source mask pixels
/// whose warped depth agrees with the target depth within `sigma` times the
/// mean composed source depth.
pub fn overlap_ratios(
    src: &Frame,
    tgt: &Frame,
    rel: &Pose,
    src_depth: DepthState,
    tgt_depth: DepthState,
    sigma: f64,
) -> (f64, f64) {
    let ds = src.prior.compose_clamped(src_depth.0, src_depth.1);
    let dt = tgt.prior.compose_clamped(tgt_depth.0, tgt_depth.1);
    let Ok(flow) = compute_flow(&src.camera, &ds, tgt.mask(), rel) else {
        return (0.0, 0.0);
    };
    overlap_from_flow(src, &ds, &dt, &flow, rel, sigma)
}

fn overlap_from_flow(src: &Frame, ds: &DenseMap, dt: &DenseMap, flow: &Flow, rel: &Pose, sigma: f64) -> (f64, f64) {
    let total = src.mask().iter().filter(|&&m| m).count();
    if total == 0 {
        return (0.0, 0.0);
    }
    let mean_depth = src
        .mask()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| ds.at_index(0, i))
        .sum::<f64>()
        / total as f64;
    let tol = sigma * mean_depth;
    let cam = &src.camera;
    let w = cam.width;
    let mut inliers = 0;
    for i in 0..flow.omega.len() {
        if !flow.omega[i] {
            continue;
        }
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let z = rel.transform_point(&(cam.ray(x, y) * ds.at_index(0, i))).z;
        let q = Vector2::new(x + flow.u[i], y + flow.v[i]);
        if let Some(cell) = dt.cell(q.x, q.y) {
            if (z - dt.sample_channel(0, &cell)).abs() < tol {
                inliers += 1;
            }
        }
    }
    (flow.omega_count() as f64 / total as f64, inliers as f64 / total as f64)
}

/// Overlap ratios and mean flow magnitude of a pair in one pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairDiagnostics {
    pub area: f64,
    pub point: f64,
    pub mean_flow: f64,
}

pub fn pair_diagnostics(
    src: &Frame,
    tgt: &Frame,
    rel: &Pose,
    src_depth: DepthState,
    tgt_depth: DepthState,
    sigma: f64,
) -> Result<PairDiagnostics> {
    let ds = src.prior.compose_clamped(src_depth.0, src_depth.1);
    let dt = tgt.prior.compose_clamped(tgt_depth.0, tgt_depth.1);
    let flow = compute_flow(&src.camera, &ds, tgt.mask(), rel)?;
    let (area, point) = overlap_from_flow(src, &ds, &dt, &flow, rel, sigma);
    Ok(PairDiagnostics {
        area,
        point,
        mean_flow: mean_flow_magnitude(&flow)?,
    })
}
