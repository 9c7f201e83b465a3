//! Flat `key = value` run configuration covering every module's settings.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{DEFAULT_RPE_INTERVAL, DEFAULT_THRESHOLDS};
use crate::losses::{default_bandwidth, DEFAULT_EPSILON, DEFAULT_MARGIN};
use crate::sim::{MaskKind, SceneConfig, TrajectoryKind};
use crate::slam::SlamConfig;
use crate::solver::LmConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Single-threaded execution; results do not depend on it.
    pub deterministic: bool,
    pub scene: SceneConfig,
    pub slam: SlamConfig,
    /// Damping multipliers of the unrolled solver used for training.
    pub differentiable_lm: LmConfig,
    pub loss_epsilon: f64,
    pub hist_margin: f64,
    pub rpe_interval: usize,
    pub thresholds: Vec<f64>,
    bandwidth_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            deterministic: true,
            scene: SceneConfig::default(),
            slam: SlamConfig::default(),
            differentiable_lm: LmConfig::differentiable(),
            loss_epsilon: DEFAULT_EPSILON,
            hist_margin: DEFAULT_MARGIN,
            rpe_interval: DEFAULT_RPE_INTERVAL,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            bandwidth_explicit: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn trajectory_name(t: TrajectoryKind) -> &'static str {
    match t {
        TrajectoryKind::Orbit => "orbit",
        TrajectoryKind::Sweep => "sweep",
        TrajectoryKind::Loop => "loop",
        TrajectoryKind::RandomWalk => "random_walk",
    }
}

fn mask_name(m: MaskKind) -> &'static str {
    match m {
        MaskKind::Full => "full",
        MaskKind::Circular => "circular",
    }
}

impl RunConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines in order; blank lines and lines starting
    /// with `#` are skipped. Unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.slam.seed = seed;
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.slam;
        let sc = &mut self.scene;
        match key {
            "seed" => {
                let seed = parse(key, v)?;
                self.set_seed(seed);
            }
            "deterministic" => self.deterministic = parse(key, v)?,
            "use_pose_hints" => s.use_pose_hints = parse(key, v)?,

            "height" => sc.height = parse(key, v)?,
            "width" => sc.width = parse(key, v)?,
            "frames" => sc.frames = parse(key, v)?,
            "trajectory" => {
                sc.trajectory = match v {
                    "orbit" => TrajectoryKind::Orbit,
                    "sweep" => TrajectoryKind::Sweep,
                    "loop" => TrajectoryKind::Loop,
                    "random_walk" => TrajectoryKind::RandomWalk,
                    _ => return Err(Error::Config(format!("unknown trajectory `{v}`"))),
                }
            }
            "mask" => {
                sc.mask = match v {
                    "full" => MaskKind::Full,
                    "circular" => MaskKind::Circular,
                    _ => return Err(Error::Config(format!("unknown mask `{v}`"))),
                }
            }
            "basis_count" => sc.basis_count = parse(key, v)?,
            "levels" => sc.levels = parse(key, v)?,
            "feature_channels" => sc.feature_channels = parse(key, v)?,
            "descriptor_channels" => sc.descriptor_channels = parse(key, v)?,
            "relief" => sc.relief = parse(key, v)?,
            "motion" => sc.motion = parse(key, v)?,
            "noise_depth_rel" => sc.noise.depth_rel = parse(key, v)?,
            "noise_feature_abs" => sc.noise.feature_abs = parse(key, v)?,
            "noise_pose_init" => sc.noise.pose_init = parse(key, v)?,

            "tracking_max_iters" => s.tracking.lm.max_iters = parse(key, v)?,
            "tracking_damp_init" => s.tracking.lm.damp_init = parse(key, v)?,
            "tracking_damp_min" => s.tracking.lm.damp_min = parse(key, v)?,
            "tracking_damp_max" => s.tracking.lm.damp_max = parse(key, v)?,
            "tracking_damp_up" => s.tracking.lm.up_mult = parse(key, v)?,
            "tracking_damp_down" => s.tracking.lm.down_mult = parse(key, v)?,
            "tracking_grad_tol" => s.tracking.lm.grad_tol = parse(key, v)?,
            "tracking_step_ratio" => s.tracking.lm.step_ratio_tol = parse(key, v)?,
            "tracking_jacobian_ratio" => s.tracking.lm.jacobian_recompute_ratio = parse(key, v)?,
            "tracking_reference_factor" => s.reference_factor = parse(key, v)?,
            "diff_damp_up" => self.differentiable_lm.up_mult = parse(key, v)?,
            "diff_damp_down" => self.differentiable_lm.down_mult = parse(key, v)?,

            "fm_level_weights" => {
                let w = parse_list(key, v)?;
                s.tracking.fm_level_weights = w.clone();
                s.verify.fm_level_weights = w.clone();
                s.mapping.fm_level_weights = w;
            }
            "fm_enabled" => {
                let on = parse(key, v)?;
                s.tracking.use_fm = on;
                s.mapping.use_fm = on;
            }
            "fm_weight" => s.mapping.fm_weight = parse(key, v)?,
            "rp_enabled" => s.tracking.use_rp = parse(key, v)?,
            "rp_weight" => s.tracking.rp_weight = parse(key, v)?,
            "rp_sigma" => s.tracking.rp_sigma = parse(key, v)?,
            "smg_weight" => s.verify.smg_weight = parse(key, v)?,
            "smg_sigma" => s.verify.smg_sigma = parse(key, v)?,
            "gc_weight" => s.mapping.gc_weight = parse(key, v)?,
            "gc_sigma" => {
                let sigma = parse(key, v)?;
                s.verify.gc_sigma = sigma;
                s.mapping.gc_sigma = sigma;
            }
            "cd_weight" => s.mapping.cd_weight = parse(key, v)?,
            "anchor_weight" => s.mapping.anchor_weight = parse(key, v)?,

            "match_candidates" => s.matching.max_candidates = parse(key, v)?,
            "match_stride" => s.matching.grid_stride = parse(key, v)?,
            "match_refine" => s.matching.refine = parse(key, v)?,
            "ransac_iterations" => s.ransac.iterations = parse(key, v)?,
            "ransac_early_exit" => s.ransac.early_exit_ratio = parse(key, v)?,
            "ransac_noise_mult" => s.ransac.noise_mult = parse(key, v)?,

            "keyframe_max_overlap_area" => s.keyframe.max_overlap_area = parse(key, v)?,
            "keyframe_max_overlap_point" => s.keyframe.max_overlap_point = parse(key, v)?,
            "keyframe_max_inlier_ratio" => s.keyframe.max_inlier_ratio = parse(key, v)?,
            "keyframe_min_flow_frac" => s.keyframe.min_flow_frac = parse(key, v)?,
            "keyframe_max_temporal" => s.keyframe.max_temporal_connections = parse(key, v)?,
            "keyframe_min_connect_inlier_ratio" => s.keyframe.min_connect_inlier_ratio = parse(key, v)?,

            "local_loop" => s.local_loop = parse(key, v)?,
            "global_loop" => s.global_loop = parse(key, v)?,
            "loop_local_window" => s.loops.local_window = parse(key, v)?,
            "loop_distance_mult" => s.loops.distance_mult = parse(key, v)?,
            "loop_metric_mult" => s.loops.metric_mult = parse(key, v)?,
            "loop_min_inlier_ratio" => s.loops.min_inlier_ratio = parse(key, v)?,
            "loop_min_overlap_area" => s.loops.min_overlap_area = parse(key, v)?,
            "loop_min_overlap_point" => s.loops.min_overlap_point = parse(key, v)?,
            "loop_flow_mult" => s.loops.flow_mult = parse(key, v)?,
            "loop_global_min_gap" => s.loops.global_min_gap = parse(key, v)?,
            "loop_similarity_mult" => s.loops.similarity_mult = parse(key, v)?,
            "loop_global_candidates" => s.loops.global_candidates = parse(key, v)?,
            "loop_rot_weight" => s.loops.rot_weight = parse(key, v)?,
            "loop_trans_weight" => s.loops.trans_weight = parse(key, v)?,

            "pose_scale_max_iters" => s.pose_scale.lm.max_iters = parse(key, v)?,
            "pose_scale_no_relin" => s.pose_scale.lm.max_no_relin = Some(parse(key, v)?),
            "pose_scale_relin_pose" => relin(&mut s.pose_scale.lm)?.pose = parse(key, v)?,
            "pose_scale_relin_scale" => relin(&mut s.pose_scale.lm)?.scale = parse(key, v)?,
            "pose_scale_edge_weight" => s.pose_scale.edge_weight = parse(key, v)?,
            "pose_scale_link_weight" => s.pose_scale.link_weight = parse(key, v)?,
            "pose_scale_w_rot" => s.pose_scale.w_rot = parse(key, v)?,
            "pose_scale_w_scl" => s.pose_scale.w_scl = parse(key, v)?,
            "pose_scale_sc_weight" => s.pose_scale.sc_weight = parse(key, v)?,

            "mapping_max_iters" => s.mapping.lm.max_iters = parse(key, v)?,
            "mapping_no_relin" => s.mapping.lm.max_no_relin = Some(parse(key, v)?),
            "mapping_relin_pose" => relin(&mut s.mapping.lm)?.pose = parse(key, v)?,
            "mapping_relin_scale" => relin(&mut s.mapping.lm)?.scale = parse(key, v)?,
            "mapping_relin_code" => relin(&mut s.mapping.lm)?.code = parse(key, v)?,
            "mapping_refine_rounds" => s.mapping.refine_rounds = parse(key, v)?,

            "loss_epsilon" => self.loss_epsilon = parse(key, v)?,
            "hist_bins" => {
                s.histogram.bins = parse(key, v)?;
                if !self.bandwidth_explicit {
                    s.histogram.bandwidth = default_bandwidth(s.histogram.bins);
                }
            }
            "hist_bandwidth" => {
                s.histogram.bandwidth = parse(key, v)?;
                self.bandwidth_explicit = true;
            }
            "hist_margin" => self.hist_margin = parse(key, v)?,
            "signature_level" => s.signature_level = parse(key, v)?,

            "rpe_interval" => self.rpe_interval = parse(key, v)?,
            "thresholds" => self.thresholds = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order. Feeding the
    /// result back through [`RunConfig::set`] reproduces the config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.slam;
        let sc = &self.scene;
        let t = &s.tracking.lm;
        let ps = &s.pose_scale.lm;
        let mp = &s.mapping.lm;
        let pr = ps.relin_thresholds.unwrap_or_default();
        let mr = mp.relin_thresholds.unwrap_or_default();
        fn e(k: &'static str, v: impl Display) -> (&'static str, String) {
            (k, v.to_string())
        }
        vec![
            e("seed", s.seed),
            e("deterministic", self.deterministic),
            e("use_pose_hints", s.use_pose_hints),
            e("height", sc.height),
            e("width", sc.width),
            e("frames", sc.frames),
            e("trajectory", trajectory_name(sc.trajectory)),
            e("mask", mask_name(sc.mask)),
            e("basis_count", sc.basis_count),
            e("levels", sc.levels),
            e("feature_channels", sc.feature_channels),
            e("descriptor_channels", sc.descriptor_channels),
            e("relief", sc.relief),
            e("motion", sc.motion),
            e("noise_depth_rel", sc.noise.depth_rel),
            e("noise_feature_abs", sc.noise.feature_abs),
            e("noise_pose_init", sc.noise.pose_init),
            e("tracking_max_iters", t.max_iters),
            e("tracking_damp_init", t.damp_init),
            e("tracking_damp_min", t.damp_min),
            e("tracking_damp_max", t.damp_max),
            e("tracking_damp_up", t.up_mult),
            e("tracking_damp_down", t.down_mult),
            e("tracking_grad_tol", t.grad_tol),
            e("tracking_step_ratio", t.step_ratio_tol),
            e("tracking_jacobian_ratio", t.jacobian_recompute_ratio),
            e("tracking_reference_factor", s.reference_factor),
            e("diff_damp_up", self.differentiable_lm.up_mult),
            e("diff_damp_down", self.differentiable_lm.down_mult),
            e("fm_level_weights", list(&s.tracking.fm_level_weights)),
            e("fm_enabled", s.tracking.use_fm),
            e("fm_weight", s.mapping.fm_weight),
            e("rp_enabled", s.tracking.use_rp),
            e("rp_weight", s.tracking.rp_weight),
            e("rp_sigma", s.tracking.rp_sigma),
            e("smg_weight", s.verify.smg_weight),
            e("smg_sigma", s.verify.smg_sigma),
            e("gc_weight", s.mapping.gc_weight),
            e("gc_sigma", s.mapping.gc_sigma),
            e("cd_weight", s.mapping.cd_weight),
            e("anchor_weight", s.mapping.anchor_weight),
            e("match_candidates", s.matching.max_candidates),
            e("match_stride", s.matching.grid_stride),
            e("match_refine", s.matching.refine),
            e("ransac_iterations", s.ransac.iterations),
            e("ransac_early_exit", s.ransac.early_exit_ratio),
            e("ransac_noise_mult", s.ransac.noise_mult),
            e("keyframe_max_overlap_area", s.keyframe.max_overlap_area),
            e("keyframe_max_overlap_point", s.keyframe.max_overlap_point),
            e("keyframe_max_inlier_ratio", s.keyframe.max_inlier_ratio),
            e("keyframe_min_flow_frac", s.keyframe.min_flow_frac),
            e("keyframe_max_temporal", s.keyframe.max_temporal_connections),
            e("keyframe_min_connect_inlier_ratio", s.keyframe.min_connect_inlier_ratio),
            e("local_loop", s.local_loop),
            e("global_loop", s.global_loop),
            e("loop_local_window", s.loops.local_window),
            e("loop_distance_mult", s.loops.distance_mult),
            e("loop_metric_mult", s.loops.metric_mult),
            e("loop_min_inlier_ratio", s.loops.min_inlier_ratio),
            e("loop_min_overlap_area", s.loops.min_overlap_area),
            e("loop_min_overlap_point", s.loops.min_overlap_point),
            e("loop_flow_mult", s.loops.flow_mult),
            e("loop_global_min_gap", s.loops.global_min_gap),
            e("loop_similarity_mult", s.loops.similarity_mult),
            e("loop_global_candidates", s.loops.global_candidates),
            e("loop_rot_weight", s.loops.rot_weight),
            e("loop_trans_weight", s.loops.trans_weight),
            e("pose_scale_max_iters", ps.max_iters),
            e("pose_scale_no_relin", ps.max_no_relin.unwrap_or(0)),
            e("pose_scale_relin_pose", pr.pose),
            e("pose_scale_relin_scale", pr.scale),
            e("pose_scale_edge_weight", s.pose_scale.edge_weight),
            e("pose_scale_link_weight", s.pose_scale.link_weight),
            e("pose_scale_w_rot", s.pose_scale.w_rot),
            e("pose_scale_w_scl", s.pose_scale.w_scl),
            e("pose_scale_sc_weight", s.pose_scale.sc_weight),
            e("mapping_max_iters", mp.max_iters),
            e("mapping_no_relin", mp.max_no_relin.unwrap_or(0)),
            e("mapping_relin_pose", mr.pose),
            e("mapping_relin_scale", mr.scale),
            e("mapping_relin_code", mr.code),
            e("mapping_refine_rounds", s.mapping.refine_rounds),
            e("loss_epsilon", self.loss_epsilon),
            e("hist_bins", s.histogram.bins),
            e("hist_bandwidth", s.histogram.bandwidth),
            e("hist_margin", self.hist_margin),
            e("signature_level", s.signature_level),
            e("rpe_interval", self.rpe_interval),
            e("thresholds", list(&self.thresholds)),
        ]
    }

    /// The config as `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.slam.validate()?;
        self.differentiable_lm.validate()?;
        if !(self.loss_epsilon >= 0.0 && self.loss_epsilon.is_finite()) {
            return Err(Error::Config("loss_epsilon must be non-negative".into()));
        }
        if !(self.hist_margin >= 0.0 && self.hist_margin.is_finite()) {
            return Err(Error::Config("hist_margin must be non-negative".into()));
        }
        if self.rpe_interval == 0 {
            return Err(Error::Config("rpe_interval must be positive".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 1.0 && t.is_finite())) {
            return Err(Error::Config("thresholds must be finite and above 1".into()));
        }
        Ok(())
    }
}

fn relin(lm: &mut LmConfig) -> Result<&mut crate::solver::RelinThresholds> {
    lm.relin_thresholds
        .as_mut()
        .ok_or_else(|| Error::Config("solver has no relinearization thresholds".into()))
}
