//! The nine acceptance checks. Each returns an [`Outcome`] instead of
//! panicking so that the acceptance target can report all of them.

use std::fs;
use std::path::Path;
use std::time::Instant;

use fgslam::cli::{
    cmd_eval, cmd_run, cmd_simulate, RunConfig, DEPTH_DIR, FRAMES_FILE, GRAPH_FILE, LOG_FILE, TRAJECTORY_FILE,
};

use fgslam::eval::{ate, depth_metrics, rpe, sync_and_align, DepthScaling, Trajectory};
use fgslam::factors::{
    fm_objective, gc_objective, rp_objective, rps_objective, smg_objective, CodeFactor, Factor, FeatureMetricFactor,
    GcSamples, GeometricConsistencyFactor, GraphState, Linearization, PairVars, PoseFactor, RelativePoseScaleFactor,
    RelativeTarget, ReprojectionFactor, ScaleFactor, SlotState, SparseGeometryFactor, VarKey,
};
use fgslam::flow::Flow;
use fgslam::geometry::so3_log;
use fgslam::losses::{
    emd_distance, flow_loss, scale_invariant_loss, soft_histogram, triplet_histogram_loss, HistogramConfig,
};
use fgslam::sim::{generate_sequence, SceneConfig, Sequence, TrajectoryKind};
use fgslam::slam::{run_pipeline, SlamConfig};
use fgslam::solver::{lm_minimize, pose_scale_problem, GlobalLink, LmConfig, PoseScaleConfig, Problem};
use fgslam::{DenseMap, Pose};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::fixtures::{self, pair_state, random_code, random_frame, random_pose, rng, smooth_frame, FrameData};
use super::{fd_gradient, fd_hessian, oracle, rel_err, scaled_diff};

#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Collects named failures; passes when none were recorded.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    count: usize,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.count += 1;
        if !ok && self.failures.len() < 8 {
            self.failures.push(what());
        } else if !ok {
            self.failures.push(String::new());
        }
    }

    fn outcome(self, summary: String) -> Outcome {
        if self.failures.is_empty() {
            Outcome::new(true, format!("{} checks; {summary}", self.count))
        } else {
            let shown: Vec<_> = self.failures.iter().filter(|f| !f.is_empty()).cloned().collect();
            Outcome::new(
                false,
                format!(
                    "{} of {} checks failed; {summary}; {}",
                    self.failures.len(),
                    self.count,
                    shown.join("; ")
                ),
            )
        }
    }
}

// ---------------------------------------------------------------- 1

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;

struct PairSetup {
    src: FrameData,
    tgt: FrameData,
    state: GraphState,
    rel: Pose,
    s: f64,
    c: DVector<f64>,
}

fn pair_setup(r: &mut ChaCha8Rng) -> PairSetup {
    let (h, w, b, ch) = (64, 80, 4, 3);
    let src = smooth_frame(r, h, w, 3, b, ch, Some(0.5));
    let tgt = smooth_frame(r, h, w, 3, b, ch, None);
    let rel = random_pose(r, 0.03, 0.03);
    let world = random_pose(r, 1.0, 0.5);
    let s = r.random_range(0.8..1.25);
    let c = random_code(r, b, 0.1);
    let st = r.random_range(0.8..1.25);
    let ct = random_code(r, b, 0.1);
    let state = pair_state(&rel, &world, (s, c.clone()), (st, ct));
    PairSetup {
        src,
        tgt,
        state,
        rel,
        s,
        c,
    }
}

fn random_slot(r: &mut ChaCha8Rng, b: usize) -> SlotState {
    SlotState::new(
        random_pose(r, 1.5, 1.0),
        r.random_range(0.5..2.0),
        random_code(r, b, 1.0),
    )
}

fn random_target(r: &mut ChaCha8Rng) -> RelativeTarget {
    RelativeTarget {
        rel: random_pose(r, 1.0, 1.0),
        src_scale: r.random_range(0.5..2.0),
        tgt_scale: r.random_range(0.5..2.0),
    }
}

/// One random configuration of the named factor and the state it is checked at.
fn factor_case(name: &str, r: &mut ChaCha8Rng) -> (Box<dyn Factor>, GraphState) {
    let vars = PairVars::all();
    match name {
        "FM" => {
            let p = pair_setup(r);
            let f =
                FeatureMetricFactor::new(p.src.frame(0), p.tgt.frame(1), 0, 1, vars, vec![1.0, 0.8, 0.6], 1.0).unwrap();
            (Box::new(f), p.state)
        }
        "SMG" => {
            let p = pair_setup(r);
            let m = fixtures::matches(r, &p.src, &p.rel, p.s, p.c.as_slice(), 40, 0.5);
            let f = SparseGeometryFactor::new(p.src.frame(0), p.tgt.frame(1), 0, 1, vars, &m, 0.1, 1.0).unwrap();
            (Box::new(f), p.state)
        }
        "RP" => {
            let p = pair_setup(r);
            let m = fixtures::matches(r, &p.src, &p.rel, p.s, p.c.as_slice(), 40, 2.0);
            let f = ReprojectionFactor::new(p.src.frame(0), 0, 1, vars, &m, 0.03, 1.0).unwrap();
            (Box::new(f), p.state)
        }
        "GC" => {
            let p = pair_setup(r);
            let f = GeometricConsistencyFactor::new(
                p.src.frame(0),
                p.tgt.frame(1),
                0,
                1,
                vars,
                GcSamples::Dense,
                0.03,
                1.0,
            )
            .unwrap();
            (Box::new(f), p.state)
        }
        "RPS" => {
            let state = GraphState::new(vec![random_slot(r, 0), random_slot(r, 0)]);
            (
                Box::new(RelativePoseScaleFactor::new(0, 1, random_target(r), 1.3, 5.0, 0.5)),
                state,
            )
        }
        "PS" => {
            let state = GraphState::new(vec![random_slot(r, 0)]);
            (Box::new(PoseFactor::new(0, random_pose(r, 1.5, 1.0), 4.0, 1.7)), state)
        }
        "SC" => {
            let state = GraphState::new(vec![random_slot(r, 0)]);
            (Box::new(ScaleFactor::new(0, r.random_range(0.5..2.0), 10.0)), state)
        }
        "CD" => {
            let state = GraphState::new(vec![random_slot(r, 6)]);
            (Box::new(CodeFactor::new(0, random_code(r, 6, 1.0), 0.7)), state)
        }
        _ => unreachable!(),
    }
}

/// Zero-residual state of a prior factor: its own target.
fn at_target(name: &str, r: &mut ChaCha8Rng) -> (Box<dyn Factor>, GraphState) {
    match name {
        "RPS" => {
            let state = GraphState::new(vec![random_slot(r, 0), random_slot(r, 0)]);
            let (a, b) = (&state.slots[0], &state.slots[1]);
            let target = RelativeTarget {
                rel: b.pose.inverse() * a.pose,
                src_scale: a.scale(),
                tgt_scale: b.scale(),
            };
            (
                Box::new(RelativePoseScaleFactor::new(0, 1, target, 1.3, 5.0, 0.5)),
                state,
            )
        }
        "PS" => {
            let state = GraphState::new(vec![random_slot(r, 0)]);
            let target = state.slots[0].pose;
            (Box::new(PoseFactor::new(0, target, 4.0, 1.7)), state)
        }
        "SC" => {
            let state = GraphState::new(vec![random_slot(r, 0)]);
            let target = state.slots[0].scale();
            (Box::new(ScaleFactor::new(0, target, 10.0)), state)
        }
        "CD" => {
            let state = GraphState::new(vec![random_slot(r, 6)]);
            let target = state.slots[0].code.clone();
            (Box::new(CodeFactor::new(0, target, 0.7)), state)
        }
        _ => unreachable!(),
    }
}

pub const FACTORS: [&str; 8] = ["FM", "SMG", "RP", "GC", "RPS", "PS", "SC", "CD"];

/// Largest relative gradient error of one factor over `n` random configurations.
pub fn gradient_error(name: &str, seed: u64, n: usize) -> (f64, usize) {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut degenerate = 0;
    for _ in 0..n {
        let (f, state) = factor_case(name, &mut r);
        let lin = f.linearize(&state);
        if !(lin.cost > 0.0) || lin.gradient.norm() < 1e-8 {
            degenerate += 1;
            continue;
        }
        assert!(
            (lin.cost - f.cost(&state)).abs() <= 1e-12 * lin.cost.max(1.0),
            "{name} cost mismatch"
        );
        let fd = fd_gradient(f.as_ref(), &state, FD_STEP);
        worst = worst.max(rel_err(lin.gradient.as_slice(), fd.as_slice()));
    }
    (worst, degenerate)
}

/// Largest relative Hessian error of a prior factor at zero residual.
pub fn hessian_error(name: &str, seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (f, state) = at_target(name, &mut r);
        let lin: Linearization = f.linearize(&state);
        let fd = fd_hessian(f.as_ref(), &state, FD_STEP);
        worst = worst.max(rel_err(lin.hessian.as_slice(), fd.as_slice()));
    }
    worst
}

pub fn c1_jacobians() -> Outcome {
    let start = Instant::now();
    let mut checks = Checks::default();
    let mut summary = Vec::new();
    for (i, name) in FACTORS.iter().enumerate() {
        let (err, degenerate) = gradient_error(name, 100 + i as u64, 100);
        checks.check(degenerate == 0, || {
            format!("{name}: {degenerate} degenerate configurations")
        });
        checks.check(err < FD_TOL, || format!("{name} gradient error {err:.2e}"));
        summary.push(format!("{name} {err:.1e}"));
    }
    for (i, name) in ["RPS", "PS", "SC", "CD"].iter().enumerate() {
        let err = hessian_error(name, 200 + i as u64, 100);
        checks.check(err < FD_TOL, || format!("{name} Hessian error {err:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    checks.check(secs < 30.0, || format!("took {secs:.1} s"));
    checks.outcome(format!("worst gradient errors {}; {secs:.1} s", summary.join(", ")))
}

// ---------------------------------------------------------------- 2

const ORACLE_TOL: f64 = 1e-10;

fn small_pair(r: &mut ChaCha8Rng, full: bool) -> (FrameData, FrameData) {
    let valid = if full { 1.0 } else { 0.85 };
    (
        random_frame(r, 8, 10, 2, 2, 3, valid),
        random_frame(r, 8, 10, 2, 2, 3, valid),
    )
}

fn random_depths(r: &mut ChaCha8Rng, frames: usize, valid: f64) -> (Vec<DenseMap>, Vec<DenseMap>) {
    let mut est = Vec::new();
    let mut gt = Vec::new();
    for _ in 0..frames {
        let g = DenseMap::from_fn(1, 8, 10, |_, _, _| r.random_range(0.5..2.0));
        let mask: Vec<bool> = (0..80).map(|_| r.random::<f64>() < valid).collect();
        // a few non-positive estimates exercise the validity rule
        let e = DenseMap::from_fn(1, 8, 10, |_, y, x| {
            let v = g.get(0, y, x) * r.random_range(0.6..1.6);
            if (x + y) % 17 == 0 {
                0.0
            } else {
                v
            }
        });
        gt.push(g.with_mask(mask).unwrap());
        est.push(e);
    }
    (est, gt)
}

fn random_poses(r: &mut ChaCha8Rng, n: usize) -> Vec<Pose> {
    (0..n).map(|_| random_pose(r, 2.0, 1.0)).collect()
}

fn noisy(r: &mut ChaCha8Rng, poses: &[Pose], rot: f64, trans: f64) -> Vec<Pose> {
    poses.iter().map(|p| *p * random_pose(r, rot, trans)).collect()
}

pub fn c2_oracles() -> Outcome {
    let mut r = rng(2);
    let mut checks = Checks::default();
    let mut worst = std::collections::BTreeMap::<&str, f64>::new();
    let mut record = |checks: &mut Checks, name: &'static str, a: f64, b: f64| {
        let d = scaled_diff(a, b);
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(d);
        checks.check(d < ORACLE_TOL, || format!("{name}: {a} vs oracle {b}"));
    };
    for case in 0..40 {
        let full = case % 4 == 0;
        let (src, tgt) = small_pair(&mut r, full);
        let (fs, ft) = (src.frame(0), tgt.frame(1));
        let rel = random_pose(&mut r, 0.05, 0.05);
        let s = r.random_range(0.7..1.4);
        let c = random_code(&mut r, 2, 0.5);
        let st = r.random_range(0.7..1.4);
        let ct = random_code(&mut r, 2, 0.5);
        let lw = [1.0, 0.7];

        match (
            fm_objective(&fs, &ft, &rel, (s, &c), &lw),
            oracle::fm(&src, &tgt, &rel, s, c.as_slice(), &lw),
        ) {
            (Ok(a), Some(b)) => record(&mut checks, "FM", a, b),
            (Err(_), None) => checks.check(true, String::new),
            (a, b) => checks.check(false, || format!("FM support disagrees: {a:?} vs {b:?}")),
        }

        let m = fixtures::matches(&mut r, &src, &rel, s, c.as_slice(), 12, 1.0);
        let a = smg_objective(&m, &fs, &ft, &rel, (s, &c), (st, &ct), 0.1).unwrap();
        record(
            &mut checks,
            "SMG",
            a,
            oracle::smg(&m, &src, &tgt, &rel, s, c.as_slice(), st, ct.as_slice(), 0.1),
        );

        let a = rp_objective(&m, &fs, &rel, (s, &c), 0.03).unwrap();
        record(&mut checks, "RP", a, oracle::rp(&m, &src, &rel, s, c.as_slice(), 0.03));

        match (
            gc_objective(GcSamples::Dense, &fs, &ft, &rel, (s, &c), (st, &ct), 0.03),
            oracle::gc(&src, &tgt, &rel, s, c.as_slice(), st, ct.as_slice(), 0.03),
        ) {
            (Ok(a), Some(b)) => record(&mut checks, "GC", a, b),
            (Err(_), None) => checks.check(true, String::new),
            (a, b) => checks.check(false, || format!("GC support disagrees: {a:?} vs {b:?}")),
        }

        // depth and descriptor losses on 8 x 10 maps
        let n = 80;
        let mask: Vec<bool> = (0..n).map(|i| full || i % 5 != 0).collect();
        let est: Vec<f64> = (0..n).map(|_| r.random_range(0.1..3.0)).collect();
        let gt: Vec<f64> = (0..n).map(|_| r.random_range(0.1..3.0)).collect();
        let a = scale_invariant_loss(&est, &gt, &mask, 1e-4).unwrap();
        record(&mut checks, "L_si", a, oracle::scale_invariant(&est, &gt, &mask, 1e-4));

        let hc = HistogramConfig {
            bins: 20,
            bandwidth: r.random_range(0.01..0.1),
        };
        let v1: Vec<f64> = (0..n).map(|_| r.random_range(-1.2..1.2)).collect();
        let v2: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let h1 = soft_histogram(&v1, &mask, &hc).unwrap();
        let h2 = soft_histogram(&v2, &mask, &hc).unwrap();
        let o1 = oracle::histogram(&v1, &mask, hc.bins, hc.bandwidth);
        let o2 = oracle::histogram(&v2, &mask, hc.bins, hc.bandwidth);
        for (a, b) in h1.bins.iter().zip(&o1) {
            record(&mut checks, "histogram", *a, *b);
        }
        record(
            &mut checks,
            "EMD",
            emd_distance(&h1, &h2).unwrap(),
            oracle::emd(&o1, &o2),
        );

        let desc = |r: &mut ChaCha8Rng, spread: f64| {
            DenseMap::from_fn(3, 8, 10, |_, _, _| r.random_range(-spread..spread))
                .with_mask(mask.clone())
                .unwrap()
        };
        let (ds, dt, df) = (desc(&mut r, 0.5), desc(&mut r, 0.6), desc(&mut r, 0.9));
        let margin = r.random_range(0.0..0.5);
        let a = triplet_histogram_loss(&ds, &dt, &df, &hc, margin).unwrap();
        record(
            &mut checks,
            "L_hist",
            a,
            oracle::triplet(&ds, &dt, &df, hc.bins, hc.bandwidth, margin),
        );

        let field = |r: &mut ChaCha8Rng| (0..n).map(|_| r.random_range(-3.0..3.0)).collect::<Vec<f64>>();
        let flow = |u: Vec<f64>, v: Vec<f64>| Flow {
            height: 8,
            width: 10,
            u,
            v,
            omega: vec![true; n],
        };
        let (gu, gv, eu, ev) = (field(&mut r), field(&mut r), field(&mut r), field(&mut r));
        let o = oracle::flow((&gu, &gv), (&eu, &ev), &mask);
        let a = flow_loss(&flow(gu, gv), &flow(eu, ev), &mask).unwrap();
        record(&mut checks, "L_flow", a, o);

        // trajectory metrics on 8 + 10 poses
        let gt_poses = random_poses(&mut r, 18);
        let est_poses = noisy(&mut r, &gt_poses, 0.1, 0.1);
        let scale = r.random_range(0.2..5.0);
        let offset = random_pose(&mut r, 3.0, 2.0);
        let est_poses: Vec<Pose> = est_poses
            .iter()
            .map(|p| {
                let q = offset * *p;
                Pose::new(q.rotation, q.translation * scale)
            })
            .collect();
        let traj = |p: &[Pose]| Trajectory::new(p.iter().copied().enumerate().collect()).unwrap();
        let al = sync_and_align(&traj(&est_poses), &traj(&gt_poses)).unwrap();
        let src: Vec<Vector3<f64>> = est_poses.iter().map(|p| p.translation).collect();
        let dst: Vec<Vector3<f64>> = gt_poses.iter().map(|p| p.translation).collect();
        let (os, or, ot) = oracle::similarity(&src, &dst);
        let aligned: Vec<Pose> = est_poses
            .iter()
            .map(|p| Pose::new(or * p.rotation, os * or * p.translation + ot))
            .collect();
        let lib = ate(&al.est, &al.gt).unwrap();
        let (orot, otrans) = oracle::ate(&aligned, &gt_poses);
        record(&mut checks, "ATE", lib.trans, otrans);
        record(&mut checks, "ATE", lib.rot, orot);
        let delta = 1 + case % 5;
        let lib = rpe(&est_poses, &gt_poses, delta).unwrap();
        let (orot, otrans) = oracle::rpe(&est_poses, &gt_poses, delta);
        record(&mut checks, "RPE", lib.trans, otrans);
        record(&mut checks, "RPE", lib.rot, orot);

        let (de, dg) = random_depths(&mut r, 3, if full { 1.0 } else { 0.8 });
        let thetas = [1.1, 1.25, 1.5625];
        for (scaling, oscale) in [
            (DepthScaling::Trajectory(scale), Some(scale)),
            (DepthScaling::Median, None),
        ] {
            let lib = depth_metrics(&de, &dg, scaling, &thetas).unwrap();
            let (oard, oth) = oracle::depth(&de, &dg, oscale, &thetas);
            record(&mut checks, "ARD", lib.ard, oard);
            for ((_, a), b) in lib.thresholds.iter().zip(&oth) {
                record(&mut checks, "Threshold", *a, *b);
            }
        }
    }
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.0e}")).collect();
    let names = worst.len();
    checks.check(names == 13, || format!("{names} of 13 objectives compared"));
    checks.outcome(format!("worst differences {}", summary.join(", ")))
}

// ---------------------------------------------------------------- 3

/// `(x - m)^T A (x - m)` over the code of slot 0.
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub m: DVector<f64>,
    pub keys: [VarKey; 1],
}

impl Factor for Quadratic {
    fn name(&self) -> &'static str {
        "Q"
    }
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }
    fn cost(&self, s: &GraphState) -> f64 {
        let d = &s.slots[0].code - &self.m;
        d.dot(&(&self.a * &d))
    }
    fn linearize(&self, s: &GraphState) -> Linearization {
        let d = &s.slots[0].code - &self.m;
        Linearization {
            cost: d.dot(&(&self.a * &d)),
            gradient: &self.a * &d * 2.0,
            hessian: &self.a * 2.0,
        }
    }
}

pub fn spd(r: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    &b * b.transpose() + DMatrix::identity(n, n) * 0.5
}

pub fn c3_lm() -> Outcome {
    let mut r = rng(3);
    let mut checks = Checks::default();
    let cfg = LmConfig {
        grad_tol: 1e-10,
        step_ratio_tol: 0.0,
        max_iters: 10,
        ..LmConfig::tracking()
    };
    let mut worst_err: f64 = 0.0;
    let mut worst_iters = 0;
    for case in 0..20 {
        let a = spd(&mut r, 5);
        let m = random_code(&mut r, 5, 3.0);
        let mut p = Problem::new();
        p.add(Quadratic {
            a,
            m: m.clone(),
            keys: [VarKey::code(0)],
        });
        let init = GraphState::new(vec![SlotState::new(Pose::identity(), 1.0, random_code(&mut r, 5, 3.0))]);
        let res = lm_minimize(&p, init, &cfg).unwrap();
        let err = (&res.solution.slots[0].code - &m).amax();
        worst_err = worst_err.max(err);
        worst_iters = worst_iters.max(res.iterations);
        checks.check(err < 1e-8, || format!("case {case}: solution error {err:.2e}"));
        checks.check(res.iterations <= 10, || {
            format!("case {case}: {} iterations", res.iterations)
        });
        let acc = res.accepted_errors();
        checks.check(acc.windows(2).all(|w| w[1] < w[0]), || {
            format!("case {case}: accepted errors not decreasing")
        });
        checks.check(acc.len() >= 2, || format!("case {case}: no accepted step"));

        let mut lambda = cfg.damp_init;
        for (k, step) in res.trace.iter().enumerate() {
            if step.accepted {
                lambda = (lambda / 10.0).max(1e-6);
            }
            checks.check(step.damping == lambda, || {
                format!("case {case} step {k}: damping {} expected {lambda}", step.damping)
            });
            checks.check((1e-6..=1e-2).contains(&step.damping), || {
                format!("case {case}: damping {}", step.damping)
            });
            if !step.accepted {
                lambda = (lambda * 100.0).min(1e-2);
            }
        }
    }
    checks.outcome(format!(
        "max solution error {worst_err:.1e} in at most {worst_iters} iterations"
    ))
}

// ---------------------------------------------------------------- 4, 5

/// Largest distance between surface points seen by the sequence, from depth
/// samples on a stride-4 grid; a lower bound of the true diameter.
pub fn scene_diameter(seq: &Sequence) -> f64 {
    let cam = seq.camera;
    let mut pts = Vec::new();
    for f in &seq.frames {
        let d = &f.gt_depth;
        for y in (0..d.height()).step_by(4) {
            for x in (0..d.width()).step_by(4) {
                if d.is_valid(y, x) {
                    let p = cam.ray(x as f64, y as f64) * d.get(0, y, x);
                    pts.push(f.gt_pose.transform_point(&p));
                }
            }
        }
    }
    let step = pts.len().div_ceil(1500).max(1);
    let sub: Vec<_> = pts.iter().step_by(step).collect();
    let mut best: f64 = 0.0;
    for (i, a) in sub.iter().enumerate() {
        for b in &sub[i + 1..] {
            best = best.max((*a - *b).norm());
        }
    }
    best
}

/// Largest per-frame relative motion `(deg, distance)` of a pose list.
pub fn max_motion(poses: &[Pose]) -> (f64, f64) {
    poses.windows(2).fold((0.0, 0.0), |acc, w| {
        let d = w[0].inverse() * w[1];
        (
            acc.0.max(so3_log(&d.rotation).norm().to_degrees()),
            acc.1.max(d.translation.norm()),
        )
    })
}

/// Largest per-frame relative pose error `(deg, distance)` of aligned poses.
pub fn max_relative_error(est: &[Pose], gt: &[Pose]) -> (f64, f64) {
    let mut worst: (f64, f64) = (0.0, 0.0);
    for i in 0..est.len() - 1 {
        let d = (gt[i].inverse() * gt[i + 1]).inverse() * (est[i].inverse() * est[i + 1]);
        worst.0 = worst.0.max(so3_log(&d.rotation).norm().to_degrees());
        worst.1 = worst.1.max(d.translation.norm());
    }
    worst
}

pub fn tracking_scene() -> SceneConfig {
    SceneConfig {
        height: 128,
        width: 160,
        frames: 30,
        trajectory: TrajectoryKind::Sweep,
        ..SceneConfig::default()
    }
}

pub fn c4_tracking() -> Outcome {
    let start = Instant::now();
    let seq = generate_sequence(&tracking_scene()).unwrap();
    let diameter = scene_diameter(&seq);
    let gt_poses = seq.gt_poses();
    let motion = max_motion(&gt_poses);
    let mut checks = Checks::default();
    checks.check(motion.0 <= 5.0 && motion.1 <= 0.02 * diameter, || {
        format!("sweep motion {:.2} deg / {:.4} exceeds the bound", motion.0, motion.1)
    });
    let frames = (0..seq.frames.len()).map(|i| (seq.frame(i).unwrap(), None));
    let p = run_pipeline(frames, SlamConfig::default()).unwrap();
    let gt = Trajectory::new(gt_poses.into_iter().enumerate().collect()).unwrap();
    let a = sync_and_align(&p.trajectory(), &gt).unwrap();
    checks.check(a.est.len() == seq.frames.len(), || {
        format!("{} of {} frames tracked", a.est.len(), seq.frames.len())
    });
    let (rot, trans) = max_relative_error(&a.est, &a.gt);
    checks.check(rot < 0.1, || format!("rotation error {rot:.4} deg"));
    checks.check(trans < 1e-3 * diameter, || format!("translation error {trans:.2e}"));
    checks.outcome(format!(
        "max per-frame error {rot:.4} deg, {:.4}% of diameter {diameter:.3}; motion up to {:.2} deg, {:.2}%; {:.1} s",
        100.0 * trans / diameter,
        motion.0,
        100.0 * motion.1 / diameter,
        start.elapsed().as_secs_f64()
    ))
}

pub fn loop_config(global_loop: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("frames", "60"),
        ("trajectory", "loop"),
        ("noise_depth_rel", "0.02"),
        ("noise_feature_abs", "0.01"),
        ("global_loop", if global_loop { "true" } else { "false" }),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.set_seed(0);
    cfg
}

pub fn c5_loop() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let seq_dir = dir.path().join("seq");
    let on = loop_config(true);
    let off = loop_config(false);
    cmd_simulate(&on, &seq_dir).unwrap();
    let diameter = scene_diameter(&generate_sequence(&on.scene).unwrap());
    let mut ates = Vec::new();
    let mut closures = Vec::new();
    for (name, cfg) in [("closed", &on), ("open", &off)] {
        let out = dir.path().join(name);
        let summary = cmd_run(&seq_dir, cfg, &out).unwrap();
        let report = cmd_eval(&out, &seq_dir, cfg).unwrap();
        ates.push(report.get("ate_trans").unwrap());
        closures.push(summary.stats.global_loops);
    }
    let secs = start.elapsed().as_secs_f64();
    let mut checks = Checks::default();
    checks.check(ates[0] < 0.01 * diameter, || {
        format!("ATE {:.2e} with closure", ates[0])
    });
    checks.check(ates[1] > ates[0], || {
        format!("ATE without closure {:.2e} not larger", ates[1])
    });
    checks.check(secs < 300.0, || format!("took {secs:.0} s"));
    checks.outcome(format!(
        "ATE {:.3}% of diameter {diameter:.3} with {} global closures, {:.3}% without; {secs:.1} s",
        100.0 * ates[0] / diameter,
        closures[0],
        100.0 * ates[1] / diameter
    ))
}

// ---------------------------------------------------------------- 6

fn scale_slot(s: &SlotState, k: f64) -> SlotState {
    let mut o = s.clone();
    o.pose.translation *= k;
    o.log_scale += k.ln();
    o
}

pub fn scale_state(s: &GraphState, k: f64) -> GraphState {
    GraphState::new(s.slots.iter().map(|x| scale_slot(x, k)).collect())
}

pub fn scale_target(t: &RelativeTarget, k: f64) -> RelativeTarget {
    RelativeTarget {
        rel: Pose::new(t.rel.rotation, t.rel.translation * k),
        src_scale: t.src_scale * k,
        tgt_scale: t.tgt_scale * k,
    }
}

fn perturb(r: &mut ChaCha8Rng, s: &GraphState) -> GraphState {
    GraphState::new(
        s.slots
            .iter()
            .map(|x| {
                let mut o = x.clone();
                o.pose = o.pose * random_pose(r, 0.1, 0.1);
                o.log_scale += r.random_range(-0.2..0.2);
                o
            })
            .collect(),
    )
}

pub fn c6_gauge() -> Outcome {
    let mut r = rng(6);
    let mut checks = Checks::default();
    let mut worst: f64 = 0.0;
    let psc = PoseScaleConfig::default();
    for _ in 0..50 {
        for k in [0.1, 10.0] {
            let (a, b) = (random_slot(&mut r, 0), random_slot(&mut r, 0));
            let target = random_target(&mut r);
            let v0 = rps_objective(&a.pose, a.scale(), &b.pose, b.scale(), &target, 5.0, 0.5).unwrap();
            let (ak, bk) = (scale_slot(&a, k), scale_slot(&b, k));
            let v1 = rps_objective(&ak.pose, ak.scale(), &bk.pose, bk.scale(), &target, 5.0, 0.5).unwrap();
            let d = scaled_diff(v1, v0);
            worst = worst.max(d);
            checks.check(d < 1e-9, || format!("RPS {v0} became {v1} at k = {k}"));

            let n = 6;
            let base = GraphState::new((0..n).map(|_| random_slot(&mut r, 0)).collect());
            let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i + 1, i)).chain([(3, 1)]).collect();
            let link = GlobalLink {
                src: n - 1,
                tgt: 0,
                target: random_target(&mut r),
            };
            let at = perturb(&mut r, &base);
            let v0 = pose_scale_problem(&base, &edges, &link, &psc).unwrap().cost(&at);
            let link_k = GlobalLink {
                target: scale_target(&link.target, k),
                ..link.clone()
            };
            let v1 = pose_scale_problem(&scale_state(&base, k), &edges, &link_k, &psc)
                .unwrap()
                .cost(&scale_state(&at, k));
            let d = scaled_diff(v1, v0);
            worst = worst.max(d);
            checks.check(d < 1e-9, || format!("pose-scale graph {v0} became {v1} at k = {k}"));

            let gt = random_poses(&mut r, 20);
            let est = noisy(&mut r, &gt, 0.05, 0.05);
            let traj = |p: &[Pose]| Trajectory::new(p.iter().copied().enumerate().collect()).unwrap();
            let scaled: Vec<Pose> = est.iter().map(|p| Pose::new(p.rotation, p.translation * k)).collect();
            let e0 = sync_and_align(&traj(&est), &traj(&gt)).unwrap();
            let e1 = sync_and_align(&traj(&scaled), &traj(&gt)).unwrap();
            let (a0, a1) = (ate(&e0.est, &e0.gt).unwrap(), ate(&e1.est, &e1.gt).unwrap());
            for (x, y) in [(a0.trans, a1.trans), (a0.rot, a1.rot)] {
                let d = (x - y).abs();
                worst = worst.max(d);
                checks.check(d < 1e-9, || format!("aligned ATE {x} became {y} at k = {k}"));
            }
        }
    }
    checks.outcome(format!("largest change {worst:.1e}"))
}

// ---------------------------------------------------------------- 7

pub fn c7_losses() -> Outcome {
    let mut r = rng(7);
    let mut checks = Checks::default();
    let n = 8 * 10;
    let mut worst_si: f64 = 0.0;
    for _ in 0..20 {
        let gt: Vec<f64> = (0..n).map(|_| r.random_range(0.1..5.0)).collect();
        let mask: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.8).collect();
        for k in [0.5, 1.0, 2.0] {
            let est: Vec<f64> = gt.iter().map(|g| k * g).collect();
            let exact = scale_invariant_loss(&est, &gt, &mask, 0.0).unwrap();
            let damped = scale_invariant_loss(&est, &gt, &mask, 1e-4).unwrap();
            worst_si = worst_si.max(exact);
            checks.check(exact.abs() < 1e-12, || {
                format!("L_si = {exact:.2e} at k = {k} without epsilon")
            });
            // with epsilon the log ratios spread over at most |1 - k| eps / (k min gt),
            // so the variance is bounded by a quarter of that range squared
            let gmin = gt
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(g, _)| *g)
                .fold(f64::INFINITY, f64::min);
            let bound = 0.25 * (1.01 * (1.0 - k).abs() * 1e-4 / (k * gmin)).powi(2);
            checks.check(damped >= 0.0 && damped <= bound + 1e-18, || {
                format!("L_si = {damped:.2e} at k = {k} with epsilon, bound {bound:.2e}")
            });
        }
    }

    let hc = HistogramConfig::default();
    checks.check(hc.bins == 100 && hc.bandwidth == 4.0 / 500.0, || {
        format!("histogram defaults {hc:?}")
    });
    let mut worst_trip: f64 = 0.0;
    for _ in 0..10 {
        let d = DenseMap::from_fn(4, 8, 10, |_, _, _| r.random_range(-1.0..1.0));
        let loss = triplet_histogram_loss(&d, &d, &d, &hc, 0.3).unwrap();
        worst_trip = worst_trip.max((loss - 0.3).abs());
        checks.check((loss - 0.3).abs() < 1e-15, || format!("triplet loss {loss}"));
    }

    let mut worst_mass: f64 = 0.0;
    for _ in 0..50 {
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-0.9..0.9)).collect();
        let total = soft_histogram(&v, &vec![true; n], &hc).unwrap().total();
        worst_mass = worst_mass.max((total - 1.0).abs());
        checks.check((total - 1.0).abs() < 2e-2, || format!("histogram mass {total}"));
    }
    checks.outcome(format!(
        "L_si up to {worst_si:.1e}, triplet off by {worst_trip:.1e}, histogram mass off by {worst_mass:.1e}"
    ))
}

// ---------------------------------------------------------------- 8

/// Ground truth of 10 and estimates of 13 on every pixel of three frames.
pub fn uniform_depths() -> (Vec<DenseMap>, Vec<DenseMap>) {
    let gt = vec![DenseMap::filled(1, 8, 10, 10.0); 3];
    let est = vec![DenseMap::filled(1, 8, 10, 13.0); 3];
    (est, gt)
}

pub fn c8_metrics() -> Outcome {
    let (est, gt) = uniform_depths();
    let thetas = [1.25, 1.25 * 1.25];
    let unit = depth_metrics(&est, &gt, DepthScaling::Trajectory(1.0), &thetas).unwrap();
    let median = depth_metrics(&est, &gt, DepthScaling::Median, &thetas).unwrap();
    let mut checks = Checks::default();
    checks.check(unit.ard == 0.3, || format!("ARD {} under unit scale", unit.ard));
    checks.check(unit.threshold(1.25) == Some(0.0), || {
        format!("Threshold(1.25) {:?}", unit.threshold(1.25))
    });
    checks.check(unit.threshold(1.5625) == Some(1.0), || {
        format!("Threshold(1.5625) {:?}", unit.threshold(1.5625))
    });
    checks.check(unit.frames_used == 3, || format!("{} frames used", unit.frames_used));
    checks.check(median.ard < 1e-15, || {
        format!("ARD {} under median scaling", median.ard)
    });
    checks.check(median.threshold(1.25) == Some(1.0), || {
        format!("median Threshold(1.25) {:?}", median.threshold(1.25))
    });

    // two frames with different ratios average per frame
    let gt2 = vec![DenseMap::filled(1, 2, 2, 1.0), DenseMap::filled(1, 2, 2, 1.0)];
    let est2 = vec![DenseMap::filled(1, 2, 2, 1.5), DenseMap::filled(1, 2, 2, 1.0)];
    let m = depth_metrics(&est2, &gt2, DepthScaling::Trajectory(1.0), &thetas).unwrap();
    checks.check(m.ard == 0.25, || format!("two-frame ARD {}", m.ard));
    checks.check(m.threshold(1.25) == Some(0.5), || {
        format!("two-frame Threshold {:?}", m.threshold(1.25))
    });
    checks.outcome(format!(
        "ARD {}, Threshold(1.25) {}, Threshold(1.5625) {}",
        unit.ard,
        unit.threshold(1.25).unwrap(),
        unit.threshold(1.5625).unwrap()
    ))
}

// ---------------------------------------------------------------- 9

/// Files of a run directory that must be identical across runs.
pub fn run_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for name in [TRAJECTORY_FILE, FRAMES_FILE, GRAPH_FILE, LOG_FILE] {
        out.push((name.to_string(), fs::read(dir.join(name)).unwrap()));
    }
    let mut depths: Vec<_> = fs::read_dir(dir.join(DEPTH_DIR))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    depths.sort();
    for p in depths {
        out.push((
            p.file_name().unwrap().to_string_lossy().into_owned(),
            fs::read(&p).unwrap(),
        ));
    }
    out
}

pub fn determinism_config(deterministic: bool) -> RunConfig {
    let mut cfg = loop_config(true);
    cfg.set("frames", "24").unwrap();
    cfg.deterministic = deterministic;
    cfg
}

pub fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let seq_dir = dir.path().join("seq");
    cmd_simulate(&determinism_config(true), &seq_dir).unwrap();
    let mut runs = Vec::new();
    for (name, det) in [("a", true), ("b", true), ("parallel", false)] {
        let out = dir.path().join(name);
        cmd_run(&seq_dir, &determinism_config(det), &out).unwrap();
        runs.push(run_outputs(&out));
    }
    let mut checks = Checks::default();
    let files = runs[0].len();
    checks.check(runs[0].iter().any(|f| f.0.ends_with(".sgdm")), || {
        "no depth maps written".into()
    });
    for (name, other) in [("second run", &runs[1]), ("multi-threaded run", &runs[2])] {
        checks.check(other.len() == files, || {
            format!("{name} wrote {} files, expected {files}", other.len())
        });
        // the log echoes the thread setting, so only the deterministic rerun compares it
        for (a, b) in runs[0]
            .iter()
            .zip(other.iter())
            .filter(|(a, _)| name == "second run" || a.0 != LOG_FILE)
        {
            checks.check(a == b, || format!("{name}: {} differs", a.0));
        }
    }
    checks.outcome(format!("{files} output files byte-identical across 3 runs"))
}
