//! Keyframe graph and the tracking, keyframing, mapping and loop-closure
//! stages of the pipeline.

use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::factors::{
    CodeFactor, FeatureMetricFactor, GcSamples, GeometricConsistencyFactor, GraphState, PairVars, PoseFactor,
    ScaleFactor, SlotState,
};
use crate::frame::Frame;
use crate::geometry::{rotation_angle_between, Pose, Similarity};
use crate::losses::{channel_histograms, signature_similarity, HistogramConfig, SoftHistogram};
use crate::map::{subsample, DenseMap};
use crate::matching::{
    filter_matches_3d, inlier_ratio, match_descriptors, pair_diagnostics, DepthState, MatchConfig, MatchSet,
    RansacConfig,
};
use crate::solver::{
    optimize_full_graph, optimize_pair_geometric, optimize_pose_scale_graph, optimize_tracking, GlobalLink, LmConfig,
    LmResult, LmStatus, PairResult, PoseScaleConfig, Problem, TrackingConfig, VerifyConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframePolicy {
    pub max_overlap_area: f64,
    pub max_overlap_point: f64,
    pub max_inlier_ratio: f64,
    /// Minimum mean flow as a fraction of the image width.
    pub min_flow_frac: f64,
    pub max_temporal_connections: usize,
    pub min_connect_inlier_ratio: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            max_overlap_area: 0.8,
            max_overlap_point: 0.9,
            max_inlier_ratio: 0.4,
            min_flow_frac: 0.08,
            max_temporal_connections: 3,
            min_connect_inlier_ratio: 0.7,
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

impl KeyframePolicy {
    pub fn validate(&self) -> Result<()> {
        unit_interval("max_overlap_area", self.max_overlap_area)?;
        unit_interval("max_overlap_point", self.max_overlap_point)?;
        unit_interval("max_inlier_ratio", self.max_inlier_ratio)?;
        unit_interval("min_flow_frac", self.min_flow_frac)?;
        unit_interval("min_connect_inlier_ratio", self.min_connect_inlier_ratio)?;
        if self.max_temporal_connections == 0 {
            return Err(Error::Config("max_temporal_connections must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopPolicy {
    pub local_window: usize,
    pub distance_mult: f64,
    pub metric_mult: f64,
    pub min_inlier_ratio: f64,
    pub min_overlap_area: f64,
    pub min_overlap_point: f64,
    /// Candidate mean flow must stay below the reference flow times this.
    pub flow_mult: f64,
    pub global_min_gap: usize,
    pub similarity_mult: f64,
    pub global_candidates: usize,
    pub rot_weight: f64,
    pub trans_weight: f64,
}

impl Default for LoopPolicy {
    fn default() -> Self {
        Self {
            local_window: 9,
            distance_mult: 5.0,
            metric_mult: 0.7,
            min_inlier_ratio: 0.2,
            min_overlap_area: 0.5,
            min_overlap_point: 0.5,
            flow_mult: 1.0 / 0.7,
            global_min_gap: 10,
            similarity_mult: 0.7,
            global_candidates: 5,
            rot_weight: 1.0,
            trans_weight: 1.0,
        }
    }
}

impl LoopPolicy {
    pub fn validate(&self) -> Result<()> {
        positive("distance_mult", self.distance_mult)?;
        positive("metric_mult", self.metric_mult)?;
        positive("flow_mult", self.flow_mult)?;
        positive("similarity_mult", self.similarity_mult)?;
        unit_interval("min_inlier_ratio", self.min_inlier_ratio)?;
        unit_interval("min_overlap_area", self.min_overlap_area)?;
        unit_interval("min_overlap_point", self.min_overlap_point)?;
        if self.rot_weight < 0.0 || self.trans_weight < 0.0 {
            return Err(Error::Config("pose distance weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Full-graph factor settings and the mapping solver.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingConfig {
    pub lm: LmConfig,
    pub fm_level_weights: Vec<f64>,
    pub fm_weight: f64,
    pub use_fm: bool,
    pub gc_weight: f64,
    pub gc_sigma: f64,
    pub cd_weight: f64,
    pub anchor_weight: f64,
    /// Extra rounds after the last frame.
    pub refine_rounds: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::mapping(),
            fm_level_weights: vec![10.0, 9.0, 8.0, 7.0],
            fm_weight: 1.0,
            use_fm: true,
            gc_weight: 0.1,
            gc_sigma: 0.03,
            cd_weight: 1e-4,
            anchor_weight: 1e4,
            refine_rounds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlamConfig {
    pub seed: u64,
    pub tracking: TrackingConfig,
    pub verify: VerifyConfig,
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    pub histogram: HistogramConfig,
    /// Signatures are computed on the descriptor map subsampled by `2^level`.
    pub signature_level: usize,
    pub reference_factor: f64,
    pub keyframe: KeyframePolicy,
    pub loops: LoopPolicy,
    pub pose_scale: PoseScaleConfig,
    pub mapping: MappingConfig,
    pub local_loop: bool,
    pub global_loop: bool,
    /// Start tracking from the per-frame pose hints instead of the last pose.
    pub use_pose_hints: bool,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tracking: TrackingConfig::default(),
            verify: VerifyConfig::default(),
            matching: MatchConfig::default(),
            ransac: RansacConfig::default(),
            histogram: HistogramConfig::default(),
            signature_level: 1,
            reference_factor: 0.6,
            keyframe: KeyframePolicy::default(),
            loops: LoopPolicy::default(),
            pose_scale: PoseScaleConfig::default(),
            mapping: MappingConfig::default(),
            local_loop: true,
            global_loop: true,
            use_pose_hints: false,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracking.lm.validate()?;
        self.verify.lm.validate()?;
        self.pose_scale.lm.validate()?;
        self.mapping.lm.validate()?;
        if self.mapping.lm.relin_thresholds.is_none() {
            return Err(Error::Config("mapping needs relinearization thresholds".into()));
        }
        self.histogram.validate()?;
        self.keyframe.validate()?;
        self.loops.validate()?;
        unit_interval("reference_factor", self.reference_factor)?;
        if !self.tracking.use_fm && !self.tracking.use_rp {
            return Err(Error::Config("tracking needs FM or RP".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConnectionKind {
    Temporal,
    LocalLoop,
    GlobalLoop,
}

impl ConnectionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConnectionKind::Temporal => "temporal",
            ConnectionKind::LocalLoop => "local",
            ConnectionKind::GlobalLoop => "global",
        }
    }
}

/// Edge between keyframe slots; `src` is the newer keyframe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Connection {
    pub src: usize,
    pub tgt: usize,
    pub kind: ConnectionKind,
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub frame: Arc<Frame>,
    pub signature: Vec<SoftHistogram>,
}

#[derive(Clone, Debug)]
pub struct KeyframeGraph {
    keyframes: Vec<Keyframe>,
    connections: Vec<Connection>,
    state: GraphState,
    anchor: Option<(Pose, f64)>,
}

impl Default for KeyframeGraph {
    fn default() -> Self {
        Self {
            keyframes: Vec::new(),
            connections: Vec::new(),
            state: GraphState::new(Vec::new()),
            anchor: None,
        }
    }
}

impl KeyframeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn keyframe(&self, i: usize) -> &Keyframe {
        &self.keyframes[i]
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn connections(&self) -> &[Connection] {
        &self.connections
    }

    pub fn state(&self) -> &GraphState {
        &self.state
    }

    pub fn anchor(&self) -> Option<(Pose, f64)> {
        self.anchor
    }

    pub fn pose(&self, i: usize) -> Pose {
        self.state.slots[i].pose
    }

    pub fn scale(&self, i: usize) -> f64 {
        self.state.slots[i].scale()
    }

    pub fn depth_state(&self, i: usize) -> DepthState<'_> {
        (self.scale(i), &self.state.slots[i].code)
    }

    pub fn depth_map(&self, i: usize) -> DenseMap {
        let s = &self.state.slots[i];
        self.keyframes[i].frame.prior.compose_clamped(s.scale(), &s.code)
    }

    pub fn is_connected(&self, a: usize, b: usize) -> bool {
        self.connections
            .iter()
            .any(|c| (c.src == a && c.tgt == b) || (c.src == b && c.tgt == a))
    }

    pub fn neighbors(&self, q: usize, kind: Option<ConnectionKind>) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .connections
            .iter()
            .filter(|c| kind.is_none_or(|k| c.kind == k))
            .filter_map(|c| {
                if c.src == q {
                    Some(c.tgt)
                } else if c.tgt == q {
                    Some(c.src)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// `(src, tgt)` of every connection.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.connections.iter().map(|c| (c.src, c.tgt)).collect()
    }

    /// Appends a keyframe with zero code. The first keyframe becomes the anchor.
    pub fn add_keyframe(
        &mut self,
        frame: Arc<Frame>,
        signature: Vec<SoftHistogram>,
        pose: Pose,
        scale: f64,
    ) -> Result<usize> {
        positive("keyframe scale", scale)?;
        let code = DVector::zeros(frame.basis_count());
        self.state.slots.push(SlotState::new(pose, scale, code));
        self.keyframes.push(Keyframe { frame, signature });
        if self.anchor.is_none() {
            self.anchor = Some((pose, scale));
        }
        Ok(self.keyframes.len() - 1)
    }

    pub fn connect(&mut self, src: usize, tgt: usize, kind: ConnectionKind) -> Result<()> {
        let n = self.len();
        if src >= n || tgt >= n {
            return Err(Error::Config(format!(
                "connection {src} -> {tgt} references a missing keyframe"
            )));
        }
        if src == tgt {
            return Err(Error::Config(format!("keyframe {src} cannot connect to itself")));
        }
        if self.is_connected(src, tgt) {
            return Err(Error::Config(format!(
                "keyframes {src} and {tgt} are already connected"
            )));
        }
        self.connections.push(Connection { src, tgt, kind });
        Ok(())
    }

    pub fn set_state(&mut self, state: GraphState) -> Result<()> {
        if state.slots.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: state.slots.len(),
            });
        }
        self.state = state;
        Ok(())
    }

    /// Checks connectivity and anchoring.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        if self.anchor.is_none() {
            return Err(Error::Config("graph has no anchor".into()));
        }
        for c in &self.connections {
            if c.src >= self.len() || c.tgt >= self.len() || c.src == c.tgt {
                return Err(Error::Config(format!("invalid connection {} -> {}", c.src, c.tgt)));
            }
        }
        for i in 1..self.len() {
            if self.neighbors(i, Some(ConnectionKind::Temporal)).iter().all(|&j| j > i) {
                return Err(Error::Disconnected);
            }
        }
        Ok(())
    }

    /// FM and GC on every connection, CD on every code, PS and SC on the anchor.
    pub fn mapping_problem(&self, cfg: &MappingConfig) -> Result<Problem> {
        let (anchor_pose, anchor_scale) = self.anchor.ok_or_else(|| Error::Config("graph has no anchor".into()))?;
        let mut p = Problem::new();
        for c in &self.connections {
            let (a, b) = (&self.keyframes[c.src].frame, &self.keyframes[c.tgt].frame);
            if cfg.use_fm {
                p.add(FeatureMetricFactor::new(
                    a.clone(),
                    b.clone(),
                    c.src,
                    c.tgt,
                    PairVars::all(),
                    cfg.fm_level_weights.clone(),
                    cfg.fm_weight,
                )?);
            }
            p.add(GeometricConsistencyFactor::new(
                a.clone(),
                b.clone(),
                c.src,
                c.tgt,
                PairVars::all(),
                GcSamples::Dense,
                cfg.gc_sigma,
                cfg.gc_weight,
            )?);
        }
        for (i, k) in self.keyframes.iter().enumerate() {
            p.add(CodeFactor::new(i, DVector::zeros(k.frame.basis_count()), cfg.cd_weight));
        }
        p.add(PoseFactor::new(0, anchor_pose, 1.0, cfg.anchor_weight));
        p.add(ScaleFactor::new(0, anchor_scale, cfg.anchor_weight));
        Ok(p)
    }
}

/// `rot_weight * geodesic angle + trans_weight * centre distance`.
pub fn pose_distance(a: &Pose, b: &Pose, policy: &LoopPolicy) -> f64 {
    policy.rot_weight * rotation_angle_between(&a.rotation, &b.rotation)
        + policy.trans_weight * (a.translation - b.translation).norm()
}

/// Per-channel descriptor histograms used for retrieval.
pub fn signature(frame: &Frame, cfg: &SlamConfig) -> Result<Vec<SoftHistogram>> {
    let map = if cfg.signature_level == 0 {
        frame.descriptors.clone()
    } else {
        subsample(&frame.descriptors, cfg.signature_level)
    };
    channel_histograms(&map, &cfg.histogram)
}

/// Descriptor matches between two views before and after 3D filtering.
#[derive(Clone, Debug)]
pub struct PairMatches {
    pub candidates: MatchSet,
    pub filtered: MatchSet,
    /// Maps source points onto target points; `None` if filtering failed.
    pub transform: Option<Similarity>,
}

impl PairMatches {
    pub fn inlier_ratio(&self) -> f64 {
        inlier_ratio(&self.filtered, &self.candidates)
    }
}

pub fn match_pair(
    src: &Frame,
    src_depth: &DenseMap,
    tgt: &Frame,
    tgt_depth: &DenseMap,
    cfg: &SlamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairMatches> {
    let candidates = match_descriptors(&src.descriptors, &tgt.descriptors, &cfg.matching)?;
    match filter_matches_3d(&candidates, src_depth, tgt_depth, &src.camera, &cfg.ransac, rng) {
        Ok((filtered, t)) => Ok(PairMatches {
            candidates,
            filtered,
            transform: Some(t),
        }),
        Err(Error::InsufficientCorrespondences { .. }) => Ok(PairMatches {
            filtered: MatchSet {
                pairs: Vec::new(),
                candidate_count: candidates.len(),
            },
            candidates,
            transform: None,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingDiagnostics {
    pub area: f64,
    pub point: f64,
    pub inlier_ratio: f64,
    pub mean_flow: f64,
}

#[derive(Clone, Debug)]
pub struct TrackOutcome {
    pub reference: usize,
    /// Frame pose in the reference camera frame.
    pub rel: Pose,
    /// Frame pose in the world.
    pub pose: Pose,
    /// Depth scale of the frame relative to the reference.
    pub scale: f64,
    pub diagnostics: TrackingDiagnostics,
    pub iterations: usize,
    pub status: LmStatus,
}

/// Spatially closest keyframe to `last_pose` among those whose appearance
/// similarity reaches `reference_factor` of the best one.
pub fn select_reference(
    graph: &KeyframeGraph,
    last_pose: &Pose,
    sig: &[SoftHistogram],
    cfg: &SlamConfig,
) -> Result<usize> {
    if graph.is_empty() {
        return Err(Error::Config("empty keyframe graph".into()));
    }
    let sims = graph
        .keyframes()
        .iter()
        .map(|k| signature_similarity(sig, &k.signature))
        .collect::<Result<Vec<_>>>()?;
    let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut pick = None;
    for (i, s) in sims.iter().enumerate() {
        if *s < cfg.reference_factor * best {
            continue;
        }
        let d = pose_distance(&graph.pose(i), last_pose, &cfg.loops);
        if pick.is_none_or(|(_, dp)| d < dp) {
            pick = Some((i, d));
        }
    }
    Ok(pick.map(|p| p.0).unwrap_or(0))
}

/// Tracks `frame` against the selected reference, starting from `init` (world).
pub fn track_frame(
    graph: &KeyframeGraph,
    frame: &Arc<Frame>,
    sig: &[SoftHistogram],
    init: &Pose,
    cfg: &SlamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrackOutcome> {
    let r = select_reference(graph, init, sig, cfg)?;
    let reference = &graph.keyframe(r).frame;
    let ref_depth = graph.depth_map(r);
    let zero = DVector::zeros(frame.basis_count());
    let frame_depth = frame.prior.compose_clamped(1.0, &zero);
    let m = match_pair(reference, &ref_depth, frame, &frame_depth, cfg, rng)?;
    // the similarity maps reference points onto frame points at unit frame scale
    let scale = m
        .transform
        .map(|t| 1.0 / t.scale)
        .filter(|s| s.is_finite() && *s > 0.0)
        .unwrap_or(graph.scale(r));
    let ref_pose = graph.pose(r);
    let init_rel = ref_pose.inverse() * *init;
    let res = optimize_tracking(
        reference,
        graph.depth_state(r),
        frame,
        &init_rel,
        &m.filtered.pairs,
        &cfg.tracking,
    )?;
    let d = pair_diagnostics(
        reference,
        frame,
        &res.pose.inverse(),
        graph.depth_state(r),
        (scale, &zero),
        cfg.verify.gc_sigma,
    )
    .map_err(|_| Error::TrackingLost)?;
    Ok(TrackOutcome {
        reference: r,
        rel: res.pose,
        pose: ref_pose * res.pose,
        scale,
        diagnostics: TrackingDiagnostics {
            area: d.area,
            point: d.point,
            inlier_ratio: m.inlier_ratio(),
            mean_flow: d.mean_flow,
        },
        iterations: res.iterations,
        status: res.status,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoveltyReason {
    AreaOverlap,
    PointOverlap,
    InlierRatio,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeDecision {
    pub create: bool,
    pub flow_ok: bool,
    pub reasons: Vec<NoveltyReason>,
}

/// Enough flow and at least one novelty trigger.
pub fn should_create_keyframe(d: &TrackingDiagnostics, policy: &KeyframePolicy, width: usize) -> KeyframeDecision {
    let flow_ok = d.mean_flow >= policy.min_flow_frac * width as f64;
    let mut reasons = Vec::new();
    if d.area < policy.max_overlap_area {
        reasons.push(NoveltyReason::AreaOverlap);
    }
    if d.point < policy.max_overlap_point {
        reasons.push(NoveltyReason::PointOverlap);
    }
    if d.inlier_ratio < policy.max_inlier_ratio {
        reasons.push(NoveltyReason::InlierRatio);
    }
    KeyframeDecision {
        create: flow_ok && !reasons.is_empty(),
        flow_ok,
        reasons,
    }
}

/// Adds a keyframe connected to the previous keyframe and to up to
/// `max_temporal_connections - 1` earlier ones that match well enough.
pub fn create_keyframe(
    graph: &mut KeyframeGraph,
    frame: Arc<Frame>,
    sig: Vec<SoftHistogram>,
    pose: Pose,
    scale: f64,
    cfg: &SlamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let q = graph.add_keyframe(frame, sig, pose, scale)?;
    if q == 0 {
        return Ok(q);
    }
    graph.connect(q, q - 1, ConnectionKind::Temporal)?;
    let depth = graph.depth_map(q);
    let extra = cfg.keyframe.max_temporal_connections - 1;
    for j in (q.saturating_sub(1 + extra)..q - 1).rev() {
        let m = match_pair(
            &graph.keyframe(q).frame,
            &depth,
            &graph.keyframe(j).frame,
            &graph.depth_map(j),
            cfg,
            rng,
        )?;
        if m.inlier_ratio() >= cfg.keyframe.min_connect_inlier_ratio {
            graph.connect(q, j, ConnectionKind::Temporal)?;
        }
    }
    Ok(q)
}

/// Metrics of the query and its spatially closest temporal neighbour.
#[derive(Clone, Debug)]
pub struct ReferencePair {
    pub other: usize,
    pub distance: f64,
    pub inlier_ratio: f64,
    pub similarity: f64,
    pub area: f64,
    pub point: f64,
    pub mean_flow: f64,
}

pub fn reference_pair(
    graph: &KeyframeGraph,
    q: usize,
    cfg: &SlamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<ReferencePair>> {
    let pq = graph.pose(q);
    let Some((other, distance)) = graph
        .neighbors(q, Some(ConnectionKind::Temporal))
        .into_iter()
        .map(|j| (j, pose_distance(&pq, &graph.pose(j), &cfg.loops)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
    else {
        return Ok(None);
    };
    let (kq, ko) = (graph.keyframe(q), graph.keyframe(other));
    let m = match_pair(
        &kq.frame,
        &graph.depth_map(q),
        &ko.frame,
        &graph.depth_map(other),
        cfg,
        rng,
    )?;
    let rel = graph.pose(other).inverse() * pq;
    let Ok(d) = pair_diagnostics(
        &kq.frame,
        &ko.frame,
        &rel,
        graph.depth_state(q),
        graph.depth_state(other),
        cfg.verify.gc_sigma,
    ) else {
        return Ok(None);
    };
    Ok(Some(ReferencePair {
        other,
        distance,
        inlier_ratio: m.inlier_ratio(),
        similarity: signature_similarity(&kq.signature, &ko.signature)?,
        area: d.area,
        point: d.point,
        mean_flow: d.mean_flow,
    }))
}

/// A verified loop candidate. The pair geometry has `query` as source.
#[derive(Clone, Debug)]
pub struct LoopCandidate {
    pub query: usize,
    pub candidate: usize,
    pub inlier_ratio: f64,
    pub pair: PairResult,
}

impl LoopCandidate {
    fn rank(&self) -> (f64, f64) {
        (
            self.pair.diagnostics.area.min(self.pair.diagnostics.point),
            -self.pair.diagnostics.mean_flow,
        )
    }
}

/// Appearance then geometric verification. Global candidates start from the
/// filtered-match similarity instead of the current estimates.
fn verify_candidate(
    graph: &KeyframeGraph,
    q: usize,
    c: usize,
    reference: &ReferencePair,
    global: bool,
    cfg: &SlamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<LoopCandidate>> {
    let p = &cfg.loops;
    let (kq, kc) = (&graph.keyframe(q).frame, &graph.keyframe(c).frame);
    let m = match_pair(kq, &graph.depth_map(q), kc, &graph.depth_map(c), cfg, rng)?;
    let ratio = m.inlier_ratio();
    if ratio <= (p.metric_mult * reference.inlier_ratio).max(p.min_inlier_ratio) {
        return Ok(None);
    }
    let (code_q, scale_q) = (&graph.state().slots[q].code, graph.scale(q));
    let (init, init_scale) = match (global, m.transform) {
        (true, Some(t)) => (Pose::new(t.rotation, t.translation).inverse(), scale_q * t.scale),
        (true, None) => return Ok(None),
        (false, _) => (graph.pose(q).inverse() * graph.pose(c), scale_q),
    };
    let pair = match optimize_pair_geometric(
        kq,
        (init_scale, code_q),
        kc,
        graph.depth_state(c),
        &init,
        &m.filtered.pairs,
        &cfg.verify,
    ) {
        Ok(r) => r,
        Err(Error::VerificationFailed(_)) | Err(Error::TrackingLost) | Err(Error::NoOverlap) => return Ok(None),
        Err(e) => return Err(e),
    };
    let d = pair.diagnostics;
    let ok = d.area > p.metric_mult * reference.area
        && d.point > p.metric_mult * reference.point
        && d.area > p.min_overlap_area
        && d.point > p.min_overlap_point
        && d.mean_flow < p.flow_mult * reference.mean_flow;
    Ok(ok.then_some(LoopCandidate {
        query: q,
        candidate: c,
        inlier_ratio: ratio,
        pair,
    }))
}

/// Best verified non-connected keyframe within the temporal window.
pub fn detect_local_loop(
    graph: &KeyframeGraph,
    q: usize,
    cfg: &SlamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<LoopCandidate>> {
    let Some(reference) = reference_pair(graph, q, cfg, rng)? else {
        return Ok(None);
    };
    let p = &cfg.loops;
    let pq = graph.pose(q);
    let lo = q.saturating_sub(p.local_window);
    let hi = (q + p.local_window).min(graph.len() - 1);
    let mut best: Option<LoopCandidate> = None;
    for c in lo..=hi {
        if c == q || graph.is_connected(q, c) {
            continue;
        }
        if pose_distance(&pq, &graph.pose(c), p) >= p.distance_mult * reference.distance {
            continue;
        }
        if let Some(cand) = verify_candidate(graph, q, c, &reference, false, cfg, rng)? {
            let better = match &best {
                None => true,
                Some(b) => {
                    let (ra, rb) = (cand.rank(), b.rank());
                    ra.0 > rb.0 || (ra.0 == rb.0 && ra.1 > rb.1)
                }
            };
            if better {
                best = Some(cand);
            }
        }
    }
    Ok(best)
}

/// Verified global candidates, ranked by inlier ratio and thinned so that
/// selected keyframes are at least `global_min_gap` apart.
pub fn detect_global_loop(
    graph: &KeyframeGraph,
    q: usize,
    cfg: &SlamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LoopCandidate>> {
    let p = &cfg.loops;
    let far: Vec<usize> = (0..graph.len())
        .filter(|&c| q.abs_diff(c) >= p.global_min_gap && !graph.is_connected(q, c))
        .collect();
    if far.is_empty() {
        return Ok(Vec::new());
    }
    let Some(reference) = reference_pair(graph, q, cfg, rng)? else {
        return Ok(Vec::new());
    };
    let sig = &graph.keyframe(q).signature;
    let mut scored = far
        .into_iter()
        .map(|c| Ok((c, signature_similarity(sig, &graph.keyframe(c).signature)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(p.global_candidates);
    let mut verified = Vec::new();
    for (c, s) in scored {
        if s <= p.similarity_mult * reference.similarity {
            continue;
        }
        if let Some(cand) = verify_candidate(graph, q, c, &reference, true, cfg, rng)? {
            verified.push(cand);
        }
    }
    verified.sort_by(|a, b| {
        b.inlier_ratio
            .total_cmp(&a.inlier_ratio)
            .then(a.candidate.cmp(&b.candidate))
    });
    let mut selected: Vec<LoopCandidate> = Vec::new();
    for cand in verified {
        if selected
            .iter()
            .all(|s| s.candidate.abs_diff(cand.candidate) >= p.global_min_gap)
        {
            selected.push(cand);
        }
    }
    Ok(selected)
}

/// Pose-scale graph correction for a verified global loop; on success the
/// loop becomes a connection. Returns whether the closure was accepted.
pub fn close_global_loop(graph: &mut KeyframeGraph, cand: &LoopCandidate, cfg: &PoseScaleConfig) -> Result<bool> {
    let link = GlobalLink {
        src: cand.query,
        tgt: cand.candidate,
        target: cand.pair.target(graph.scale(cand.candidate)),
    };
    let r = optimize_pose_scale_graph(graph.state(), &graph.edges(), &link, cfg)?;
    let improved = r.final_error < r.initial_error;
    if !r.final_error.is_finite() || (r.status == LmStatus::Stalled && !improved) {
        return Ok(false);
    }
    if improved {
        let mut state = graph.state().clone();
        for (s, n) in state.slots.iter_mut().zip(&r.solution.slots) {
            s.pose = n.pose;
            s.log_scale = n.log_scale;
        }
        graph.set_state(state)?;
    }
    graph.connect(cand.query, cand.candidate, ConnectionKind::GlobalLoop)?;
    Ok(true)
}

/// One full-graph optimization; `None` when the graph has no connections.
pub fn run_mapping_round(graph: &mut KeyframeGraph, cfg: &MappingConfig) -> Result<Option<LmResult>> {
    if graph.connections().is_empty() {
        return Ok(None);
    }
    let p = graph.mapping_problem(cfg)?;
    let r = optimize_full_graph(&p, graph.state().clone(), &cfg.lm)?;
    graph.set_state(r.solution.clone())?;
    Ok(Some(r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameStatus {
    Keyframe(usize),
    Tracked { reference: usize },
    Lost,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub frames: usize,
    pub keyframes: usize,
    pub lost: usize,
    pub local_loops: usize,
    pub global_loops: usize,
    pub rejected_closures: usize,
    pub mapping_rounds: usize,
}

/// Pose of a tracked frame relative to its reference keyframe at the
/// reference scale it was tracked with.
#[derive(Clone, Debug)]
struct FrameRecord {
    id: usize,
    reference: usize,
    rel: Pose,
    ref_scale: f64,
}

/// Deterministic single-threaded pipeline: each frame is tracked, then
/// keyframing, loop closure and one mapping round run in that order.
pub struct Pipeline {
    cfg: SlamConfig,
    graph: KeyframeGraph,
    records: Vec<FrameRecord>,
    rng: ChaCha8Rng,
    last_pose: Option<Pose>,
    stats: PipelineStats,
    events: Vec<String>,
}

impl Pipeline {
    pub fn new(cfg: SlamConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            graph: KeyframeGraph::new(),
            records: Vec::new(),
            rng,
            last_pose: None,
            stats: PipelineStats::default(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &SlamConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &KeyframeGraph {
        &self.graph
    }

    pub fn stats(&self) -> PipelineStats {
        self.stats
    }

    pub fn events(&self) -> &[String] {
        &self.events
    }

    fn record_pose(&self, r: &FrameRecord) -> Pose {
        let k = self.graph.pose(r.reference);
        let s = self.graph.scale(r.reference) / r.ref_scale;
        k * Pose::new(r.rel.rotation, r.rel.translation * s)
    }

    fn refresh_last_pose(&mut self) {
        if let Some(r) = self.records.last() {
            self.last_pose = Some(self.record_pose(r));
        }
    }

    /// Processes one frame; `hint` is an optional world pose guess.
    pub fn process(&mut self, frame: Frame, hint: Option<Pose>) -> Result<FrameStatus> {
        self.stats.frames += 1;
        let id = frame.id;
        if self.records.last().is_some_and(|r| r.id >= id) {
            return Err(Error::Config(format!("frame ids must increase, got {id}")));
        }
        let frame = Arc::new(frame);
        let sig = signature(&frame, &self.cfg)?;
        let Some(last) = self.last_pose else {
            let pose = hint.filter(|_| self.cfg.use_pose_hints).unwrap_or_else(Pose::identity);
            let q = create_keyframe(&mut self.graph, frame, sig, pose, 1.0, &self.cfg, &mut self.rng)?;
            self.stats.keyframes += 1;
            self.records.push(FrameRecord {
                id,
                reference: q,
                rel: Pose::identity(),
                ref_scale: 1.0,
            });
            self.events.push(format!("frame {id}: keyframe {q}"));
            self.refresh_last_pose();
            return Ok(FrameStatus::Keyframe(q));
        };
        let init = match hint {
            Some(h) if self.cfg.use_pose_hints => h,
            _ => last,
        };
        let out = match track_frame(&self.graph, &frame, &sig, &init, &self.cfg, &mut self.rng) {
            Ok(o) => o,
            Err(Error::TrackingLost) | Err(Error::NoOverlap) => {
                self.stats.lost += 1;
                self.events.push(format!("frame {id}: tracking lost"));
                return Ok(FrameStatus::Lost);
            }
            Err(e) => return Err(e),
        };
        let decision = should_create_keyframe(&out.diagnostics, &self.cfg.keyframe, frame.camera.width);
        if !decision.create {
            self.records.push(FrameRecord {
                id,
                reference: out.reference,
                rel: out.rel,
                ref_scale: self.graph.scale(out.reference),
            });
            self.refresh_last_pose();
            return Ok(FrameStatus::Tracked {
                reference: out.reference,
            });
        }
        let q = create_keyframe(
            &mut self.graph,
            frame,
            sig,
            out.pose,
            out.scale,
            &self.cfg,
            &mut self.rng,
        )?;
        self.stats.keyframes += 1;
        self.records.push(FrameRecord {
            id,
            reference: q,
            rel: Pose::identity(),
            ref_scale: out.scale,
        });
        self.events.push(format!(
            "frame {id}: keyframe {q} (reference {}, reasons {:?}, connections {:?})",
            out.reference,
            decision.reasons,
            self.graph.neighbors(q, None)
        ));
        self.close_loops(q)?;
        self.map()?;
        self.refresh_last_pose();
        Ok(FrameStatus::Keyframe(q))
    }

    fn close_loops(&mut self, q: usize) -> Result<()> {
        if self.cfg.local_loop {
            if let Some(c) = detect_local_loop(&self.graph, q, &self.cfg, &mut self.rng)? {
                self.graph.connect(q, c.candidate, ConnectionKind::LocalLoop)?;
                self.stats.local_loops += 1;
                self.events
                    .push(format!("keyframe {q}: local loop with {}", c.candidate));
            }
        }
        if self.cfg.global_loop {
            for c in detect_global_loop(&self.graph, q, &self.cfg, &mut self.rng)? {
                if close_global_loop(&mut self.graph, &c, &self.cfg.pose_scale)? {
                    self.stats.global_loops += 1;
                    self.events
                        .push(format!("keyframe {q}: global loop with {}", c.candidate));
                } else {
                    self.stats.rejected_closures += 1;
                    self.events
                        .push(format!("keyframe {q}: global loop with {} rejected", c.candidate));
                }
            }
        }
        Ok(())
    }

    fn map(&mut self) -> Result<()> {
        if let Some(r) = run_mapping_round(&mut self.graph, &self.cfg.mapping)? {
            self.stats.mapping_rounds += 1;
            self.events.push(format!(
                "mapping: error {:.6e} -> {:.6e} in {} iterations ({:?})",
                r.initial_error, r.final_error, r.iterations, r.status
            ));
        }
        Ok(())
    }

    /// Post-session refinement rounds.
    pub fn finish(&mut self) -> Result<PipelineStats> {
        for _ in 0..self.cfg.mapping.refine_rounds {
            self.map()?;
        }
        self.refresh_last_pose();
        self.graph.validate()?;
        Ok(self.stats)
    }

    /// World poses of all tracked frames under the current keyframe estimates.
    pub fn trajectory(&self) -> Trajectory {
        Trajectory::new(self.records.iter().map(|r| (r.id, self.record_pose(r))).collect())
            .expect("frame ids are checked on entry")
    }

    /// `(frame id, composed depth)` for every keyframe.
    pub fn keyframe_depths(&self) -> Vec<(usize, DenseMap)> {
        (0..self.graph.len())
            .map(|i| (self.graph.keyframe(i).frame.id, self.graph.depth_map(i)))
            .collect()
    }
}

/// Runs the pipeline over `frames` and the refinement rounds.
pub fn run_pipeline(frames: impl IntoIterator<Item = (Frame, Option<Pose>)>, cfg: SlamConfig) -> Result<Pipeline> {
    let mut p = Pipeline::new(cfg)?;
    for (f, hint) in frames {
        p.process(f, hint)?;
    }
    p.finish()?;
    Ok(p)
}
