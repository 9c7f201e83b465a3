//! Pair-wise factors between a source and a target keyframe: FM, SMG, RP, GC.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{Factor, GraphState, Linearization, RobustKernel, SlotState, VarKey};
use crate::depth::{DepthPrior, DEPTH_FLOOR};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::{hat, Pose};
use crate::map::BilinearCell;

// Points closer than this to the target image plane are not warped.
const MIN_Z: f64 = 1e-6;
const CHUNK: usize = 512;

/// Which variables a pair factor differentiates; the rest are read as constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairVars {
    pub src_pose: bool,
    pub tgt_pose: bool,
    pub src_scale: bool,
    pub src_code: bool,
    pub tgt_scale: bool,
    pub tgt_code: bool,
}

impl PairVars {
    pub fn all() -> Self {
        Self {
            src_pose: true,
            tgt_pose: true,
            src_scale: true,
            src_code: true,
            tgt_scale: true,
            tgt_code: true,
        }
    }

    /// Only the target pose, as in tracking against a fixed reference.
    pub fn tgt_pose_only() -> Self {
        Self {
            src_pose: false,
            tgt_pose: true,
            src_scale: false,
            src_code: false,
            tgt_scale: false,
            tgt_code: false,
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    src_pose: Option<usize>,
    tgt_pose: Option<usize>,
    src_scale: Option<usize>,
    src_code: Option<usize>,
    tgt_scale: Option<usize>,
    tgt_code: Option<usize>,
    dim: usize,
    keys: Vec<VarKey>,
}

impl Layout {
    fn new(vars: PairVars, src_slot: usize, tgt_slot: usize, b_src: usize, b_tgt: usize, tgt_depth: bool) -> Self {
        let mut dim = 0;
        let mut keys = Vec::new();
        let mut take = |on: bool, key: VarKey, n: usize| {
            if on && n > 0 {
                keys.push(key);
                dim += n;
                Some(dim - n)
            } else {
                None
            }
        };
        let src_pose = take(vars.src_pose, VarKey::pose(src_slot), 6);
        let tgt_pose = take(vars.tgt_pose, VarKey::pose(tgt_slot), 6);
        let src_scale = take(vars.src_scale, VarKey::scale(src_slot), 1);
        let src_code = take(vars.src_code, VarKey::code(src_slot), b_src);
        let tgt_scale = take(vars.tgt_scale && tgt_depth, VarKey::scale(tgt_slot), 1);
        let tgt_code = take(vars.tgt_code && tgt_depth, VarKey::code(tgt_slot), b_tgt);
        Self {
            src_pose,
            tgt_pose,
            src_scale,
            src_code,
            tgt_scale,
            tgt_code,
            dim,
            keys,
        }
    }
}

/// State of a pair read from the graph.
struct PairState<'a> {
    r: Matrix3<f64>,
    t: Vector3<f64>,
    s_src: f64,
    c_src: &'a DVector<f64>,
    s_tgt: f64,
    c_tgt: &'a DVector<f64>,
}

impl<'a> PairState<'a> {
    fn new(src: &'a SlotState, tgt: &'a SlotState) -> Self {
        let rel = tgt.pose.inverse() * src.pose;
        Self {
            r: rel.rotation,
            t: rel.translation,
            s_src: src.scale(),
            c_src: &src.code,
            s_tgt: tgt.scale(),
            c_tgt: &tgt.code,
        }
    }
}

/// Clamped composed depth; the flag is true when the floor is active.
#[inline]
fn depth_at(prior: &DepthPrior, index: usize, scale: f64, code: &DVector<f64>) -> (f64, bool) {
    let d = prior.compose_with(index, scale, code);
    if d < DEPTH_FLOOR {
        (DEPTH_FLOOR, true)
    } else {
        (d, false)
    }
}

/// Warped source point: camera-frame point `cap_p`, target-frame point `p`.
struct Warp {
    cap_p: Vector3<f64>,
    p: Vector3<f64>,
    ray: Vector3<f64>,
    clamped: bool,
}

#[inline]
fn warp(ps: &PairState, prior: &DepthPrior, index: usize, ray: Vector3<f64>) -> Warp {
    let (d, clamped) = depth_at(prior, index, ps.s_src, ps.c_src);
    let cap_p = ray * d;
    Warp {
        cap_p,
        p: ps.r * cap_p + ps.t,
        ray,
        clamped,
    }
}

/// Writes `d p / d vars` into the 3 x dim matrix `a`.
#[inline]
fn fill_point_jacobian(lay: &Layout, ps: &PairState, w: &Warp, prior: &DepthPrior, index: usize, a: &mut DMatrix<f64>) {
    a.fill(0.0);
    if let Some(o) = lay.src_pose {
        a.view_mut((0, o), (3, 3)).copy_from(&ps.r);
        a.view_mut((0, o + 3), (3, 3)).copy_from(&(-ps.r * hat(&w.cap_p)));
    }
    if let Some(o) = lay.tgt_pose {
        a.view_mut((0, o), (3, 3)).copy_from(&(-Matrix3::identity()));
        a.view_mut((0, o + 3), (3, 3)).copy_from(&hat(&w.p));
    }
    if w.clamped {
        return;
    }
    if let Some(o) = lay.src_scale {
        a.view_mut((0, o), (3, 1)).copy_from(&(ps.r * w.cap_p));
    }
    if let Some(o) = lay.src_code {
        let rr = ps.r * w.ray * ps.s_src;
        for j in 0..ps.c_src.len() {
            let b = prior.bases().at_index(j, index);
            a.view_mut((0, o + j), (3, 1)).copy_from(&(rr * b));
        }
    }
}

/// Partial sums over a chunk of samples.
struct Acc {
    cost: f64,
    count: usize,
    g: DVector<f64>,
    h: DMatrix<f64>,
}

impl Acc {
    fn new(dim: usize, lin: bool) -> Self {
        let n = if lin { dim } else { 0 };
        Self {
            cost: 0.0,
            count: 0,
            g: DVector::zeros(n),
            h: DMatrix::zeros(n, n),
        }
    }

    fn add(&mut self, other: &Acc) {
        self.cost += other.cost;
        self.count += other.count;
        if !self.g.is_empty() {
            self.g += &other.g;
            self.h += &other.h;
        }
    }
}

/// Splits `0..n` into fixed chunks evaluated in parallel and summed in order,
/// so the result does not depend on the thread count.
fn chunked<F>(n: usize, dim: usize, lin: bool, f: F) -> Acc
where
    F: Fn(std::ops::Range<usize>, &mut Acc) + Sync,
{
    let chunks: Vec<_> = (0..n.div_ceil(CHUNK)).collect();
    let parts: Vec<Acc> = chunks
        .par_iter()
        .map(|&c| {
            let mut acc = Acc::new(dim, lin);
            f(c * CHUNK..((c + 1) * CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = Acc::new(dim, lin);
    for p in &parts {
        total.add(p);
    }
    total
}

fn check_pair(src: &Frame, tgt: &Frame) -> Result<()> {
    if (src.camera.width, src.camera.height) != (tgt.camera.width, tgt.camera.height) {
        return Err(Error::DimensionMismatch {
            expected: src.camera.width * src.camera.height,
            actual: tgt.camera.width * tgt.camera.height,
        });
    }
    Ok(())
}

/// Dense feature-metric alignment over all pyramid levels.
pub struct FeatureMetricFactor {
    src: Arc<Frame>,
    tgt: Arc<Frame>,
    src_slot: usize,
    tgt_slot: usize,
    lay: Layout,
    level_weights: Vec<f64>,
    weight: f64,
}

impl FeatureMetricFactor {
    /// `level_weights[i]` scales the mean of level `i` (0 = full resolution);
    /// the level count is the length of `level_weights`.
    pub fn new(
        src: Arc<Frame>,
        tgt: Arc<Frame>,
        src_slot: usize,
        tgt_slot: usize,
        vars: PairVars,
        level_weights: Vec<f64>,
        weight: f64,
    ) -> Result<Self> {
        check_pair(&src, &tgt)?;
        let levels = src.level_count().min(tgt.level_count());
        if level_weights.is_empty() || level_weights.len() > levels {
            return Err(Error::Config(format!(
                "{} level weights for {levels} pyramid levels",
                level_weights.len()
            )));
        }
        if src.features.level(0).channels() != tgt.features.level(0).channels() {
            return Err(Error::DimensionMismatch {
                expected: src.features.level(0).channels(),
                actual: tgt.features.level(0).channels(),
            });
        }
        let lay = Layout::new(vars, src_slot, tgt_slot, src.basis_count(), tgt.basis_count(), false);
        Ok(Self {
            src,
            tgt,
            src_slot,
            tgt_slot,
            lay,
            level_weights,
            weight,
        })
    }

    /// Returns the cost, the number of warped samples over all levels and, if
    /// requested, the linearization.
    fn evaluate(&self, state: &GraphState, lin: bool) -> (f64, usize, Option<Linearization>) {
        let ps = PairState::new(&state.slots[self.src_slot], &state.slots[self.tgt_slot]);
        let dim = self.lay.dim;
        let n_levels = self.level_weights.len() as f64;
        let mut out = Linearization::zeros(if lin { dim } else { 0 });
        let mut support = 0;
        for (l, &lw) in self.level_weights.iter().enumerate() {
            let level = &self.src.levels[l];
            let fsrc = self.src.features.level(l);
            let ftgt = self.tgt.features.level(l);
            let cam = &level.camera;
            let channels = fsrc.channels();
            let acc = chunked(level.pixels.len(), dim, lin, |range, acc| {
                let mut a = DMatrix::zeros(3, dim);
                let mut ma = DMatrix::zeros(3, dim);
                for k in range {
                    let idx = level.pixels[k];
                    let w = warp(&ps, &level.prior, idx, level.rays[k]);
                    if w.p.z <= MIN_Z {
                        continue;
                    }
                    let q = cam.project_unchecked(&w.p);
                    let Some(cell) = ftgt.cell(q.x, q.y) else {
                        continue;
                    };
                    acc.count += 1;
                    let mut g2 = Matrix2::zeros();
                    let mut e = Vector2::zeros();
                    for c in 0..channels {
                        let (f, du, dv) = ftgt.sample_channel_grad(c, &cell);
                        let r = f - fsrc.at_index(c, idx);
                        acc.cost += r * r;
                        if lin {
                            let grad = Vector2::new(du, dv);
                            g2 += grad * grad.transpose();
                            e += grad * r;
                        }
                    }
                    if !lin {
                        continue;
                    }
                    let jp: Matrix2x3<f64> = cam.project_jacobian(&w.p);
                    let m: Matrix3<f64> = jp.transpose() * g2 * jp;
                    let wv: Vector3<f64> = jp.transpose() * e;
                    fill_point_jacobian(&self.lay, &ps, &w, &level.prior, idx, &mut a);
                    ma.gemm(1.0, &m, &a, 0.0);
                    acc.h.gemm_tr(1.0, &a, &ma, 1.0);
                    acc.g.gemm_tr(1.0, &a, &wv, 1.0);
                }
            });
            if acc.count == 0 {
                continue;
            }
            support += acc.count;
            let k = self.weight * lw / (n_levels * acc.count as f64);
            out.cost += k * acc.cost;
            if lin {
                out.gradient += acc.g * (2.0 * k);
                out.hessian += acc.h * (2.0 * k);
            }
        }
        let cost = out.cost;
        (cost, support, if lin { Some(out) } else { None })
    }
}

impl Factor for FeatureMetricFactor {
    fn name(&self) -> &'static str {
        "FM"
    }
    fn keys(&self) -> &[VarKey] {
        &self.lay.keys
    }
    fn cost(&self, state: &GraphState) -> f64 {
        self.evaluate(state, false).0
    }
    fn linearize(&self, state: &GraphState) -> Linearization {
        self.evaluate(state, true).2.unwrap()
    }
}

/// Builds a two-slot state with the source at `rel` and the target at the
/// identity, so that the relative pose equals `rel`.
fn pair_state(rel: &Pose, src_depth: (f64, &DVector<f64>), tgt_depth: (f64, &DVector<f64>)) -> Result<GraphState> {
    for s in [src_depth.0, tgt_depth.0] {
        if !(s > 0.0) {
            return Err(Error::Domain(s));
        }
    }
    Ok(GraphState::new(vec![
        SlotState::new(*rel, src_depth.0, src_depth.1.clone()),
        SlotState::new(Pose::identity(), tgt_depth.0, tgt_depth.1.clone()),
    ]))
}

/// Weighted multi-level feature-metric objective for source depth
/// `(scale, code)` and relative pose `rel` (source to target camera).
pub fn fm_objective(
    src: &Arc<Frame>,
    tgt: &Arc<Frame>,
    rel: &Pose,
    src_depth: (f64, &DVector<f64>),
    level_weights: &[f64],
) -> Result<f64> {
    let zero = DVector::zeros(tgt.basis_count());
    let state = pair_state(rel, src_depth, (1.0, &zero))?;
    let f = FeatureMetricFactor::new(
        src.clone(),
        tgt.clone(),
        0,
        1,
        PairVars::all(),
        level_weights.to_vec(),
        1.0,
    )?;
    let (cost, support, _) = f.evaluate(&state, false);
    if support == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(cost)
}

#[inline]
fn pixel_index(frame: &Frame, x: &Vector2<f64>) -> usize {
    x.y.round() as usize * frame.camera.width + x.x.round() as usize
}

/// Keeps matches whose source pixel is inside the source mask and whose
/// target location has a valid bilinear neighbourhood in the target mask.
fn match_cells(
    src: &Frame,
    tgt: &Frame,
    pairs: &[(Vector2<f64>, Vector2<f64>)],
) -> Vec<(usize, Vector2<f64>, BilinearCell)> {
    let (w, h) = (src.camera.width as f64, src.camera.height as f64);
    pairs
        .iter()
        .filter(|(a, _)| a.x >= -0.5 && a.y >= -0.5 && a.x < w - 0.5 && a.y < h - 0.5)
        .filter_map(|(a, b)| {
            let is = pixel_index(src, a);
            if !src.mask()[is] {
                return None;
            }
            tgt.prior.average().cell(b.x, b.y).map(|c| (is, *b, c))
        })
        .collect()
}

/// 3D distance between matched points lifted with their own depths.
pub struct SparseGeometryFactor {
    src: Arc<Frame>,
    tgt: Arc<Frame>,
    src_slot: usize,
    tgt_slot: usize,
    lay: Layout,
    pairs: Vec<(usize, Vector2<f64>, BilinearCell)>,
    kernel: RobustKernel,
    weight: f64,
}

impl SparseGeometryFactor {
    /// Source match locations are rounded to pixel centres; target depths are
    /// sampled bilinearly. Matches outside either mask are dropped.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        src: Arc<Frame>,
        tgt: Arc<Frame>,
        src_slot: usize,
        tgt_slot: usize,
        vars: PairVars,
        matches: &[(Vector2<f64>, Vector2<f64>)],
        sigma: f64,
        weight: f64,
    ) -> Result<Self> {
        check_pair(&src, &tgt)?;
        let lay = Layout::new(vars, src_slot, tgt_slot, src.basis_count(), tgt.basis_count(), true);
        let pairs = match_cells(&src, &tgt, matches);
        let kernel = RobustKernel::fair(sigma * src.mean_average_depth());
        Ok(Self {
            src,
            tgt,
            src_slot,
            tgt_slot,
            lay,
            pairs,
            kernel,
            weight,
        })
    }

    fn evaluate(&self, state: &GraphState, lin: bool) -> (f64, Option<Linearization>) {
        let ps = PairState::new(&state.slots[self.src_slot], &state.slots[self.tgt_slot]);
        let dim = self.lay.dim;
        let mut out = Linearization::zeros(if lin { dim } else { 0 });
        if self.pairs.is_empty() {
            return (0.0, if lin { Some(out) } else { None });
        }
        let cam = &self.src.camera;
        let w = cam.width;
        let mut a = DMatrix::zeros(3, dim);
        let tavg = self.tgt.prior.average();
        let tbases = self.tgt.prior.bases();
        for (is, xt, cell) in &self.pairs {
            let is = *is;
            let ray_s = cam.ray((is % w) as f64, (is / w) as f64);
            let wp = warp(&ps, &self.src.prior, is, ray_s);
            let ray_t = cam.ray(xt.x, xt.y);
            let mut d = tavg.sample_channel(0, cell);
            for j in 0..ps.c_tgt.len() {
                d += ps.c_tgt[j] * tbases.sample_channel(j, cell);
            }
            let mut dt = ps.s_tgt * d;
            let t_clamped = dt < DEPTH_FLOOR;
            if t_clamped {
                dt = DEPTH_FLOOR;
            }
            let q = ray_t * dt;
            let f = wp.p - q;
            let sq = f.norm_squared();
            out.cost += self.kernel.value(sq);
            if !lin {
                continue;
            }
            fill_point_jacobian(&self.lay, &ps, &wp, &self.src.prior, is, &mut a);
            if !t_clamped {
                if let Some(o) = self.lay.tgt_scale {
                    a.view_mut((0, o), (3, 1)).copy_from(&(-q));
                }
                if let Some(o) = self.lay.tgt_code {
                    for j in 0..ps.c_tgt.len() {
                        let b = tbases.sample_channel(j, cell);
                        a.view_mut((0, o + j), (3, 1)).copy_from(&(-ray_t * (ps.s_tgt * b)));
                    }
                }
            }
            let rho1 = self.kernel.derivative(sq);
            let fv = DVector::from_column_slice(f.as_slice());
            out.gradient.gemm_tr(2.0 * rho1, &a, &fv, 1.0);
            out.hessian.gemm_tr(2.0 * rho1, &a, &a, 1.0);
        }
        let k = self.weight / self.pairs.len() as f64;
        out.cost *= k;
        out.gradient *= k;
        out.hessian *= k;
        let cost = out.cost;
        (cost, if lin { Some(out) } else { None })
    }
}

impl Factor for SparseGeometryFactor {
    fn name(&self) -> &'static str {
        "SMG"
    }
    fn keys(&self) -> &[VarKey] {
        &self.lay.keys
    }
    fn cost(&self, state: &GraphState) -> f64 {
        self.evaluate(state, false).0
    }
    fn linearize(&self, state: &GraphState) -> Linearization {
        self.evaluate(state, true).1.unwrap()
    }
}

/// Mean Fair-robust squared 3D distance between matched points; the bound is
/// `sigma` times the mean source average depth.
pub fn smg_objective(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    src: &Arc<Frame>,
    tgt: &Arc<Frame>,
    rel: &Pose,
    src_depth: (f64, &DVector<f64>),
    tgt_depth: (f64, &DVector<f64>),
    sigma: f64,
) -> Result<f64> {
    if matches.is_empty() {
        return Err(Error::InsufficientCorrespondences { needed: 1, have: 0 });
    }
    let state = pair_state(rel, src_depth, tgt_depth)?;
    let f = SparseGeometryFactor::new(src.clone(), tgt.clone(), 0, 1, PairVars::all(), matches, sigma, 1.0)?;
    Ok(f.evaluate(&state, false).0)
}

/// Pixel reprojection error of matched source points.
pub struct ReprojectionFactor {
    src: Arc<Frame>,
    src_slot: usize,
    tgt_slot: usize,
    lay: Layout,
    pairs: Vec<(usize, Vector2<f64>)>,
    kernel: RobustKernel,
    weight: f64,
}

impl ReprojectionFactor {
    /// The Fair bound is `sigma * W^2` with `W` the image width.
    pub fn new(
        src: Arc<Frame>,
        src_slot: usize,
        tgt_slot: usize,
        vars: PairVars,
        matches: &[(Vector2<f64>, Vector2<f64>)],
        sigma: f64,
        weight: f64,
    ) -> Result<Self> {
        let lay = Layout::new(vars, src_slot, tgt_slot, src.basis_count(), 0, false);
        let w = src.camera.width;
        let pairs = matches
            .iter()
            .map(|(a, b)| (pixel_index(&src, a), *b))
            .filter(|&(i, _)| src.mask()[i])
            .collect();
        let kernel = RobustKernel::fair(sigma * (w * w) as f64);
        Ok(Self {
            src,
            src_slot,
            tgt_slot,
            lay,
            pairs,
            kernel,
            weight,
        })
    }

    fn evaluate(&self, state: &GraphState, lin: bool) -> (f64, Option<Linearization>) {
        let ps = PairState::new(&state.slots[self.src_slot], &state.slots[self.tgt_slot]);
        let dim = self.lay.dim;
        let mut out = Linearization::zeros(if lin { dim } else { 0 });
        if self.pairs.is_empty() {
            return (0.0, if lin { Some(out) } else { None });
        }
        let cam = &self.src.camera;
        let w = cam.width;
        let mut a = DMatrix::zeros(3, dim);
        let mut ja = DMatrix::zeros(2, dim);
        for &(is, xt) in &self.pairs {
            let ray = cam.ray((is % w) as f64, (is / w) as f64);
            let wp = warp(&ps, &self.src.prior, is, ray);
            if wp.p.z <= MIN_Z {
                continue;
            }
            let f = cam.project_unchecked(&wp.p) - xt;
            let sq = f.norm_squared();
            out.cost += self.kernel.value(sq);
            if !lin {
                continue;
            }
            fill_point_jacobian(&self.lay, &ps, &wp, &self.src.prior, is, &mut a);
            let jp = cam.project_jacobian(&wp.p);
            ja.gemm(1.0, &jp, &a, 0.0);
            let rho1 = self.kernel.derivative(sq);
            let fv = DVector::from_column_slice(f.as_slice());
            out.gradient.gemm_tr(2.0 * rho1, &ja, &fv, 1.0);
            out.hessian.gemm_tr(2.0 * rho1, &ja, &ja, 1.0);
        }
        let k = self.weight / self.pairs.len() as f64;
        out.cost *= k;
        out.gradient *= k;
        out.hessian *= k;
        let cost = out.cost;
        (cost, if lin { Some(out) } else { None })
    }
}

impl Factor for ReprojectionFactor {
    fn name(&self) -> &'static str {
        "RP"
    }
    fn keys(&self) -> &[VarKey] {
        &self.lay.keys
    }
    fn cost(&self, state: &GraphState) -> f64 {
        self.evaluate(state, false).0
    }
    fn linearize(&self, state: &GraphState) -> Linearization {
        self.evaluate(state, true).1.unwrap()
    }
}

/// Mean Fair-robust squared reprojection error; the bound is `sigma * W^2`.
pub fn rp_objective(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    src: &Arc<Frame>,
    rel: &Pose,
    src_depth: (f64, &DVector<f64>),
    sigma: f64,
) -> Result<f64> {
    if matches.is_empty() {
        return Err(Error::InsufficientCorrespondences { needed: 1, have: 0 });
    }
    let zero = DVector::zeros(0);
    let state = pair_state(rel, src_depth, (1.0, &zero))?;
    let f = ReprojectionFactor::new(src.clone(), 0, 1, PairVars::all(), matches, sigma, 1.0)?;
    Ok(f.evaluate(&state, false).0)
}

/// Source samples used by the geometric-consistency factor.
#[derive(Clone, Debug)]
pub enum GcSamples {
    /// Every pixel of the source mask.
    Dense,
    /// Explicit source pixel centres.
    Points(Vec<Vector2<f64>>),
}

/// Depth of warped source points against the target depth at their projection.
pub struct GeometricConsistencyFactor {
    src: Arc<Frame>,
    tgt: Arc<Frame>,
    src_slot: usize,
    tgt_slot: usize,
    lay: Layout,
    samples: Vec<usize>,
    kernel: RobustKernel,
    weight: f64,
}

impl GeometricConsistencyFactor {
    /// The Cauchy bound is `sigma` times the mean source average depth.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        src: Arc<Frame>,
        tgt: Arc<Frame>,
        src_slot: usize,
        tgt_slot: usize,
        vars: PairVars,
        samples: GcSamples,
        sigma: f64,
        weight: f64,
    ) -> Result<Self> {
        check_pair(&src, &tgt)?;
        let lay = Layout::new(vars, src_slot, tgt_slot, src.basis_count(), tgt.basis_count(), true);
        let samples = match samples {
            GcSamples::Dense => (0..src.mask().len()).filter(|&i| src.mask()[i]).collect(),
            GcSamples::Points(pts) => pts
                .iter()
                .map(|x| pixel_index(&src, x))
                .filter(|&i| src.mask()[i])
                .collect(),
        };
        let kernel = RobustKernel::cauchy(sigma * src.mean_average_depth());
        Ok(Self {
            src,
            tgt,
            src_slot,
            tgt_slot,
            lay,
            samples,
            kernel,
            weight,
        })
    }

    fn evaluate(&self, state: &GraphState, lin: bool) -> (f64, usize, Option<Linearization>) {
        let ps = PairState::new(&state.slots[self.src_slot], &state.slots[self.tgt_slot]);
        let dim = self.lay.dim;
        let cam = &self.src.camera;
        let w = cam.width;
        let tavg = self.tgt.prior.average();
        let tbases = self.tgt.prior.bases();
        let acc = chunked(self.samples.len(), dim, lin, |range, acc| {
            let mut a = DMatrix::zeros(3, dim);
            let mut row = DVector::zeros(dim);
            let mut bvals = vec![0.0; ps.c_tgt.len()];
            for k in range {
                let is = self.samples[k];
                let ray = cam.ray((is % w) as f64, (is / w) as f64);
                let wp = warp(&ps, &self.src.prior, is, ray);
                if wp.p.z <= MIN_Z {
                    continue;
                }
                let q = cam.project_unchecked(&wp.p);
                let Some(cell) = tavg.cell(q.x, q.y) else {
                    continue;
                };
                acc.count += 1;
                let (mut d, mut du, mut dv) = tavg.sample_channel_grad(0, &cell);
                for (j, bj) in bvals.iter_mut().enumerate() {
                    let (b, bu, bv) = tbases.sample_channel_grad(j, &cell);
                    *bj = b;
                    d += ps.c_tgt[j] * b;
                    du += ps.c_tgt[j] * bu;
                    dv += ps.c_tgt[j] * bv;
                }
                let mut dt = ps.s_tgt * d;
                let t_clamped = dt < DEPTH_FLOOR;
                if t_clamped {
                    dt = DEPTH_FLOOR;
                }
                let f = wp.p.z - dt;
                let sq = f * f;
                acc.cost += self.kernel.value(sq);
                if !lin {
                    continue;
                }
                fill_point_jacobian(&self.lay, &ps, &wp, &self.src.prior, is, &mut a);
                // d f / d p = e_z - grad(D_t) * d pi / d p
                let mut dfdp = Vector3::new(0.0, 0.0, 1.0);
                if !t_clamped {
                    let grad = Vector2::new(du, dv) * ps.s_tgt;
                    dfdp -= cam.project_jacobian(&wp.p).transpose() * grad;
                }
                row.gemm_tr(1.0, &a, &dfdp, 0.0);
                if !t_clamped {
                    if let Some(o) = self.lay.tgt_scale {
                        row[o] -= dt;
                    }
                    if let Some(o) = self.lay.tgt_code {
                        for (j, b) in bvals.iter().enumerate() {
                            row[o + j] -= ps.s_tgt * b;
                        }
                    }
                }
                let rho1 = self.kernel.derivative(sq);
                acc.g.axpy(2.0 * rho1 * f, &row, 1.0);
                acc.h.ger(2.0 * rho1, &row, &row, 1.0);
            }
        });
        let mut out = Linearization::zeros(if lin { dim } else { 0 });
        if acc.count == 0 {
            return (0.0, 0, if lin { Some(out) } else { None });
        }
        let k = self.weight / acc.count as f64;
        out.cost = k * acc.cost;
        if lin {
            out.gradient = acc.g * k;
            out.hessian = acc.h * k;
        }
        let cost = out.cost;
        (cost, acc.count, if lin { Some(out) } else { None })
    }
}

impl Factor for GeometricConsistencyFactor {
    fn name(&self) -> &'static str {
        "GC"
    }
    fn keys(&self) -> &[VarKey] {
        &self.lay.keys
    }
    fn cost(&self, state: &GraphState) -> f64 {
        self.evaluate(state, false).0
    }
    fn linearize(&self, state: &GraphState) -> Linearization {
        self.evaluate(state, true).2.unwrap()
    }
}

/// Mean Cauchy-robust squared depth disagreement of warped source samples.
pub fn gc_objective(
    samples: GcSamples,
    src: &Arc<Frame>,
    tgt: &Arc<Frame>,
    rel: &Pose,
    src_depth: (f64, &DVector<f64>),
    tgt_depth: (f64, &DVector<f64>),
    sigma: f64,
) -> Result<f64> {
    let state = pair_state(rel, src_depth, tgt_depth)?;
    let f = GeometricConsistencyFactor::new(src.clone(), tgt.clone(), 0, 1, PairVars::all(), samples, sigma, 1.0)?;
    let (cost, count, _) = f.evaluate(&state, false);
    if count == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(cost)
}
