use std::sync::Arc;

use nalgebra::{DVector, Vector2};

use super::lm::{lm_minimize, LmConfig, LmResult, LmStatus, Problem};
use crate::error::{Error, Result};
use crate::factors::{
    fm_objective, FeatureMetricFactor, GraphState, PairVars, RelativePoseScaleFactor, RelativeTarget,
    ReprojectionFactor, ScaleFactor, SlotState, SparseGeometryFactor, VarKey,
};
use crate::frame::Frame;
use crate::geometry::Pose;
use crate::matching::{pair_diagnostics, DepthState, PairDiagnostics};

/// Camera tracking against a reference keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingConfig {
    pub lm: LmConfig,
    pub fm_level_weights: Vec<f64>,
    pub use_fm: bool,
    pub rp_weight: f64,
    pub rp_sigma: f64,
    pub use_rp: bool,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::tracking(),
            fm_level_weights: vec![10.0, 9.0, 8.0, 7.0],
            use_fm: true,
            rp_weight: 0.1,
            rp_sigma: 0.03,
            use_rp: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackingResult {
    /// Pose of the frame in the reference camera frame.
    pub pose: Pose,
    pub final_error: f64,
    pub iterations: usize,
    pub status: LmStatus,
}

fn two_slots(src_depth: DepthState, tgt_depth: DepthState, tgt_pose: Pose) -> GraphState {
    GraphState::new(vec![
        SlotState::new(Pose::identity(), src_depth.0, src_depth.1.clone()),
        SlotState::new(tgt_pose, tgt_depth.0, tgt_depth.1.clone()),
    ])
}

fn fix_all(p: &mut Problem, slot: usize) {
    p.fix(VarKey::pose(slot));
    p.fix(VarKey::scale(slot));
    p.fix(VarKey::code(slot));
}

/// Pose of `frame` relative to `reference` minimizing weighted FM + RP.
///
/// `matches` are `(reference pixel, frame pixel)` pairs; `init` is the frame
/// pose in the reference camera frame.
pub fn optimize_tracking(
    reference: &Arc<Frame>,
    ref_depth: DepthState,
    frame: &Arc<Frame>,
    init: &Pose,
    matches: &[(Vector2<f64>, Vector2<f64>)],
    cfg: &TrackingConfig,
) -> Result<TrackingResult> {
    match fm_objective(reference, frame, &init.inverse(), ref_depth, &cfg.fm_level_weights) {
        Err(Error::NoOverlap) => return Err(Error::TrackingLost),
        Err(e) => return Err(e),
        Ok(_) => {}
    }
    let mut p = Problem::new();
    if cfg.use_fm {
        p.add(FeatureMetricFactor::new(
            reference.clone(),
            frame.clone(),
            0,
            1,
            PairVars::tgt_pose_only(),
            cfg.fm_level_weights.clone(),
            1.0,
        )?);
    }
    if cfg.use_rp && !matches.is_empty() {
        p.add(ReprojectionFactor::new(
            reference.clone(),
            0,
            1,
            PairVars::tgt_pose_only(),
            matches,
            cfg.rp_sigma,
            cfg.rp_weight,
        )?);
    }
    if p.factors().is_empty() {
        return Err(Error::TrackingLost);
    }
    fix_all(&mut p, 0);
    let zero = DVector::zeros(frame.basis_count());
    let state = two_slots(ref_depth, (1.0, &zero), *init);
    let r = lm_minimize(&p, state, &cfg.lm)?;
    let pose = r.solution.slots[1].pose;
    if !r.final_error.is_finite() || !pose.translation.iter().all(|v| v.is_finite()) {
        return Err(Error::TrackingLost);
    }
    if let Err(Error::NoOverlap) = fm_objective(reference, frame, &pose.inverse(), ref_depth, &cfg.fm_level_weights) {
        return Err(Error::TrackingLost);
    }
    Ok(TrackingResult {
        pose,
        final_error: r.final_error,
        iterations: r.iterations,
        status: r.status,
    })
}

/// Pair-wise verification: FM + SMG over the pose of `b` and the scale of `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub lm: LmConfig,
    pub fm_level_weights: Vec<f64>,
    pub smg_weight: f64,
    pub smg_sigma: f64,
    /// Depth agreement bound of the point-inlier overlap.
    pub gc_sigma: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::tracking(),
            fm_level_weights: vec![10.0, 9.0, 8.0, 7.0],
            smg_weight: 0.1,
            smg_sigma: 0.1,
            gc_sigma: 0.03,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairResult {
    /// Pose of `b` in the camera frame of `a`.
    pub pose: Pose,
    /// Optimized scale of `a`, relative to the fixed scale of `b`.
    pub src_scale: f64,
    /// Optimized over initial scale of `a`.
    pub scale_ratio: f64,
    pub diagnostics: PairDiagnostics,
    pub final_error: f64,
}

impl PairResult {
    /// Relative pose `T_b^-1 T_a` with the verified scales.
    pub fn target(&self, tgt_scale: f64) -> RelativeTarget {
        RelativeTarget {
            rel: self.pose.inverse(),
            src_scale: self.src_scale,
            tgt_scale,
        }
    }
}

/// `matches` are `(a pixel, b pixel)`; `init` is the pose of `b` in `a`.
pub fn optimize_pair_geometric(
    a: &Arc<Frame>,
    a_depth: DepthState,
    b: &Arc<Frame>,
    b_depth: DepthState,
    init: &Pose,
    matches: &[(Vector2<f64>, Vector2<f64>)],
    cfg: &VerifyConfig,
) -> Result<PairResult> {
    if matches.len() < 3 {
        return Err(Error::VerificationFailed(format!("{} matches", matches.len())));
    }
    if let Err(e) = fm_objective(a, b, &init.inverse(), a_depth, &cfg.fm_level_weights) {
        return Err(Error::VerificationFailed(e.to_string()));
    }
    let vars = PairVars {
        src_pose: false,
        tgt_pose: true,
        src_scale: true,
        src_code: false,
        tgt_scale: false,
        tgt_code: false,
    };
    let mut p = Problem::new();
    p.add(FeatureMetricFactor::new(
        a.clone(),
        b.clone(),
        0,
        1,
        vars,
        cfg.fm_level_weights.clone(),
        1.0,
    )?);
    p.add(SparseGeometryFactor::new(
        a.clone(),
        b.clone(),
        0,
        1,
        vars,
        matches,
        cfg.smg_sigma,
        cfg.smg_weight,
    )?);
    p.fix(VarKey::pose(0));
    p.fix(VarKey::code(0));
    p.fix(VarKey::scale(1));
    p.fix(VarKey::code(1));
    let state = two_slots(a_depth, b_depth, *init);
    let r = lm_minimize(&p, state, &cfg.lm)?;
    let pose = r.solution.slots[1].pose;
    let src_scale = r.solution.slots[0].scale();
    if !src_scale.is_finite() || !(src_scale > 0.0) {
        return Err(Error::VerificationFailed("degenerate scale".into()));
    }
    let diagnostics = pair_diagnostics(a, b, &pose.inverse(), (src_scale, a_depth.1), b_depth, cfg.gc_sigma)
        .map_err(|e| Error::VerificationFailed(e.to_string()))?;
    Ok(PairResult {
        pose,
        src_scale,
        scale_ratio: src_scale / a_depth.0,
        diagnostics,
        final_error: r.final_error,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseScaleConfig {
    pub lm: LmConfig,
    pub edge_weight: f64,
    pub link_weight: f64,
    pub w_rot: f64,
    pub w_scl: f64,
    pub sc_weight: f64,
}

impl Default for PoseScaleConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::pose_scale_graph(),
            edge_weight: 1.0,
            link_weight: 5.0,
            w_rot: 5.0,
            w_scl: 0.5,
            sc_weight: 10.0,
        }
    }
}

/// A verified loop connection between keyframe slots.
#[derive(Clone, Debug)]
pub struct GlobalLink {
    pub src: usize,
    pub tgt: usize,
    pub target: RelativeTarget,
}

fn connected(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for (a, b) in edges {
        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
        parent[ra] = rb;
    }
    let r0 = root(&mut parent, 0);
    (0..n).all(|i| root(&mut parent, i) == r0)
}

/// The pose-scale graph problem: RPS on every edge (targets = current
/// estimates), a heavier RPS on the global link and SC on its source scale.
pub fn pose_scale_problem(
    state: &GraphState,
    edges: &[(usize, usize)],
    link: &GlobalLink,
    cfg: &PoseScaleConfig,
) -> Result<Problem> {
    let n = state.slots.len();
    if n == 0 {
        return Err(Error::Disconnected);
    }
    let all = edges.iter().copied().chain(std::iter::once((link.src, link.tgt)));
    if edges
        .iter()
        .chain(std::iter::once(&(link.src, link.tgt)))
        .any(|&(a, b)| a >= n || b >= n)
    {
        return Err(Error::Config("edge references a missing keyframe".into()));
    }
    if !connected(n, all) {
        return Err(Error::Disconnected);
    }
    let mut p = Problem::new();
    for &(i, j) in edges {
        let (si, sj) = (&state.slots[i], &state.slots[j]);
        let target = RelativeTarget {
            rel: sj.pose.inverse() * si.pose,
            src_scale: si.scale(),
            tgt_scale: sj.scale(),
        };
        p.add(RelativePoseScaleFactor::new(
            i,
            j,
            target,
            cfg.edge_weight,
            cfg.w_rot,
            cfg.w_scl,
        ));
    }
    p.add(RelativePoseScaleFactor::new(
        link.src,
        link.tgt,
        link.target,
        cfg.link_weight,
        cfg.w_rot,
        cfg.w_scl,
    ));
    p.add(ScaleFactor::new(link.src, link.target.src_scale, cfg.sc_weight));
    p.fix(VarKey::pose(0));
    p.fix(VarKey::scale(0));
    Ok(p)
}

/// Optimizes keyframe poses and scales over the pose-scale graph. Codes are
/// left untouched.
pub fn optimize_pose_scale_graph(
    state: &GraphState,
    edges: &[(usize, usize)],
    link: &GlobalLink,
    cfg: &PoseScaleConfig,
) -> Result<LmResult> {
    let p = pose_scale_problem(state, edges, link, cfg)?;
    lm_minimize(&p, state.clone(), &cfg.lm)
}

/// Batch LM with per-variable relinearization gating over a full keyframe graph.
pub fn optimize_full_graph(p: &Problem, state: GraphState, cfg: &LmConfig) -> Result<LmResult> {
    if cfg.relin_thresholds.is_none() {
        return Err(Error::Config(
            "full-graph optimization needs relinearization thresholds".into(),
        ));
    }
    lm_minimize(p, state, cfg)
}
