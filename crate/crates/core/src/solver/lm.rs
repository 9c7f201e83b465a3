use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factors::{Factor, GraphState, Linearization, VarKey, VarKind};

/// Per-variable relinearization thresholds on the largest tangent component.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RelinThresholds {
    pub pose: f64,
    pub scale: f64,
    pub code: f64,
}

impl RelinThresholds {
    fn of(&self, kind: VarKind) -> f64 {
        match kind {
            VarKind::Pose => self.pose,
            VarKind::Scale => self.scale,
            VarKind::Code => self.code,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmConfig {
    pub damp_init: f64,
    pub damp_min: f64,
    pub damp_max: f64,
    pub up_mult: f64,
    pub down_mult: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Zero disables the increment-ratio stop.
    pub step_ratio_tol: f64,
    /// Relinearize everything after an accepted step when the error dropped
    /// by more than this fraction of the new error since the last
    /// linearization. Ignored when `relin_thresholds` is set.
    pub jacobian_recompute_ratio: f64,
    pub relin_thresholds: Option<RelinThresholds>,
    /// Stop after this many consecutive accepted steps without relinearization.
    pub max_no_relin: Option<usize>,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::tracking()
    }
}

impl LmConfig {
    /// Camera-tracking settings.
    pub fn tracking() -> Self {
        Self {
            damp_init: 1e-4,
            damp_min: 1e-6,
            damp_max: 1e-2,
            up_mult: 100.0,
            down_mult: 10.0,
            max_iters: 40,
            grad_tol: 1e-4,
            step_ratio_tol: 1e-2,
            jacobian_recompute_ratio: 1e-2,
            relin_thresholds: None,
            max_no_relin: None,
        }
    }

    /// Multipliers used when the solver is unrolled for training.
    pub fn differentiable() -> Self {
        Self {
            up_mult: 11.0,
            down_mult: 9.0,
            ..Self::tracking()
        }
    }

    /// Pose-scale graph settings.
    pub fn pose_scale_graph() -> Self {
        Self {
            max_iters: 200,
            step_ratio_tol: 0.0,
            relin_thresholds: Some(RelinThresholds {
                pose: 3e-3,
                scale: 1e-2,
                code: f64::INFINITY,
            }),
            max_no_relin: Some(5),
            ..Self::tracking()
        }
    }

    /// Batch mapping settings.
    pub fn mapping() -> Self {
        Self {
            max_iters: 20,
            step_ratio_tol: 0.0,
            relin_thresholds: Some(RelinThresholds {
                pose: 1e-3,
                scale: 1e-3,
                code: 1e-2,
            }),
            max_no_relin: Some(5),
            ..Self::tracking()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.damp_min > 0.0
            && self.damp_min <= self.damp_init
            && self.damp_init <= self.damp_max
            && self.up_mult > 1.0
            && self.down_mult > 1.0
            && self.grad_tol >= 0.0
            && self.step_ratio_tol >= 0.0
            && self.jacobian_recompute_ratio >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid LM settings {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmStatus {
    GradientTolerance,
    StepRatio,
    MaxIterations,
    NoRelinearization,
    /// A step was rejected at maximum damping.
    Stalled,
}

/// One attempted step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmStep {
    /// Total error after the attempt (unchanged when rejected).
    pub error: f64,
    pub damping: f64,
    pub accepted: bool,
    /// Factors relinearized after the step.
    pub relinearized: usize,
}

#[derive(Clone, Debug)]
pub struct LmResult {
    pub solution: GraphState,
    pub initial_error: f64,
    pub final_error: f64,
    pub iterations: usize,
    pub status: LmStatus,
    pub trace: Vec<LmStep>,
}

impl LmResult {
    pub fn accepted_errors(&self) -> Vec<f64> {
        std::iter::once(self.initial_error)
            .chain(self.trace.iter().filter(|s| s.accepted).map(|s| s.error))
            .collect()
    }
}

/// A set of factors over the slots of a [`GraphState`], some of whose
/// variables are held fixed.
#[derive(Default)]
pub struct Problem {
    factors: Vec<Box<dyn Factor>>,
    fixed: BTreeSet<VarKey>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, f: impl Factor + 'static) {
        self.factors.push(Box::new(f));
    }

    pub fn add_boxed(&mut self, f: Box<dyn Factor>) {
        self.factors.push(f);
    }

    pub fn fix(&mut self, key: VarKey) {
        self.fixed.insert(key);
    }

    pub fn is_fixed(&self, key: VarKey) -> bool {
        self.fixed.contains(&key)
    }

    pub fn factors(&self) -> &[Box<dyn Factor>] {
        &self.factors
    }

    /// Total error, summed in factor order.
    pub fn cost(&self, state: &GraphState) -> f64 {
        let parts: Vec<f64> = self.factors.par_iter().map(|f| f.cost(state)).collect();
        parts.iter().sum()
    }

    /// Per-factor error, in factor order.
    pub fn costs(&self, state: &GraphState) -> Vec<(&'static str, f64)> {
        self.factors.iter().map(|f| (f.name(), f.cost(state))).collect()
    }

    /// Free variables in key order with their offsets, and the total dimension.
    fn free_layout(&self, state: &GraphState) -> Result<(BTreeMap<VarKey, usize>, usize)> {
        let mut keys = BTreeSet::new();
        for f in &self.factors {
            for &k in f.keys() {
                if k.slot >= state.slots.len() {
                    return Err(Error::Config(format!(
                        "factor {} references missing slot {}",
                        f.name(),
                        k.slot
                    )));
                }
                if !self.fixed.contains(&k) {
                    keys.insert(k);
                }
            }
        }
        let mut offsets = BTreeMap::new();
        let mut n = 0;
        for k in keys {
            let d = state.dim(k);
            if d > 0 {
                offsets.insert(k, n);
                n += d;
            }
        }
        if n == 0 {
            return Err(Error::Config("problem has no free variable".into()));
        }
        Ok((offsets, n))
    }
}

struct Cached {
    lin: Linearization,
    at: GraphState,
    exact: bool,
}

// Offsets of each factor key in the factor's own vector and in the global one.
fn key_blocks(
    f: &dyn Factor,
    state: &GraphState,
    free: &BTreeMap<VarKey, usize>,
) -> Vec<(VarKey, usize, Option<usize>, usize)> {
    let mut local = 0;
    f.keys()
        .iter()
        .map(|&k| {
            let d = state.dim(k);
            let e = (k, local, free.get(&k).copied(), d);
            local += d;
            e
        })
        .collect()
}

fn linearize_all(p: &Problem, x: &GraphState, which: &[bool]) -> Vec<Option<Linearization>> {
    p.factors
        .par_iter()
        .zip(which.par_iter())
        .map(|(f, &on)| on.then(|| f.linearize(x)))
        .collect()
}

/// Relinearizes the selected factors at `x`; returns how many.
fn relinearize(p: &Problem, cache: &mut [Cached], x: &GraphState, which: &[bool]) -> usize {
    let mut count = 0;
    for (c, l) in cache.iter_mut().zip(linearize_all(p, x, which)) {
        if let Some(lin) = l {
            *c = Cached {
                lin,
                at: x.clone(),
                exact: true,
            };
            count += 1;
        }
    }
    count
}

fn refresh(p: &Problem, cache: &mut [Cached], x: &GraphState) -> usize {
    let stale: Vec<bool> = cache.iter().map(|c| !c.exact).collect();
    relinearize(p, cache, x, &stale)
}

/// Gradient and Gauss-Newton matrix of the cached model at `x`.
fn assemble(
    p: &Problem,
    cache: &[Cached],
    x: &GraphState,
    free: &BTreeMap<VarKey, usize>,
    n: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    for (f, c) in p.factors.iter().zip(cache) {
        let blocks = key_blocks(f.as_ref(), x, free);
        let mut gf = c.lin.gradient.clone();
        if !c.exact {
            let mut delta = DVector::zeros(gf.len());
            for &(k, lo, _, d) in &blocks {
                delta.rows_mut(lo, d).copy_from(&c.at.local(k, x));
            }
            gf.gemv(1.0, &c.lin.hessian, &delta, 1.0);
        }
        for &(_, lo, go, d) in &blocks {
            let Some(go) = go else { continue };
            let mut gb = g.rows_mut(go, d);
            gb += gf.rows(lo, d);
            for &(_, lo2, go2, d2) in &blocks {
                let Some(go2) = go2 else { continue };
                let mut hb = h.view_mut((go, go2), (d, d2));
                hb += c.lin.hessian.view((lo, lo2), (d, d2));
            }
        }
    }
    (g, h)
}

fn retract_all(x: &GraphState, free: &BTreeMap<VarKey, usize>, delta: &DVector<f64>) -> GraphState {
    let mut y = x.clone();
    for (&k, &o) in free {
        let d = x.dim(k);
        y.retract(k, delta.rows(o, d).as_slice());
    }
    y
}

/// Largest increment relative to the current value, per variable block.
fn step_ratio(x: &GraphState, free: &BTreeMap<VarKey, usize>, delta: &DVector<f64>) -> f64 {
    const FLOOR: f64 = 1e-3;
    let mut worst: f64 = 0.0;
    for (&k, &o) in free {
        let slot = &x.slots[k.slot];
        match k.kind {
            VarKind::Pose => {
                let t = slot.pose.translation.norm();
                let phi = slot.pose.rotation_log().norm();
                worst = worst.max(delta.rows(o, 3).norm() / t.max(FLOOR));
                worst = worst.max(delta.rows(o + 3, 3).norm() / phi.max(FLOOR));
            }
            VarKind::Scale => worst = worst.max(delta[o].abs() / slot.log_scale.abs().max(FLOOR)),
            VarKind::Code => {
                for j in 0..slot.code.len() {
                    worst = worst.max(delta[o + j].abs() / slot.code[j].abs().max(FLOOR));
                }
            }
        }
    }
    worst
}

/// Damped Gauss-Newton minimization of the problem's total error from `init`.
///
/// Each attempt solves `(H + lambda I) delta = -g` by Cholesky and is accepted
/// only if the true error decreases. A failed factorization counts as a
/// rejected attempt.
pub fn lm_minimize(p: &Problem, init: GraphState, cfg: &LmConfig) -> Result<LmResult> {
    cfg.validate()?;
    let (free, n) = p.free_layout(&init)?;
    let nf = p.factors.len();
    let mut x = init;
    let mut cost = p.cost(&x);
    if !cost.is_finite() {
        return Err(Error::Domain(cost));
    }
    let initial_error = cost;
    let mut cache: Vec<Cached> = linearize_all(p, &x, &vec![true; nf])
        .into_iter()
        .map(|l| Cached {
            lin: l.unwrap(),
            at: x.clone(),
            exact: true,
        })
        .collect();
    let mut lin_cost = cost;
    let mut lambda = cfg.damp_init;
    let mut iterations = 0;
    let mut no_relin = 0;
    let mut trace = Vec::new();

    let status = loop {
        if iterations >= cfg.max_iters {
            break LmStatus::MaxIterations;
        }
        let (mut g, mut h) = assemble(p, &cache, &x, &free, n);
        if g.amax() < cfg.grad_tol {
            if cache.iter().all(|c| c.exact) {
                break LmStatus::GradientTolerance;
            }
            refresh(p, &mut cache, &x);
            lin_cost = cost;
            (g, h) = assemble(p, &cache, &x, &free, n);
            if g.amax() < cfg.grad_tol {
                break LmStatus::GradientTolerance;
            }
        }
        iterations += 1;
        for i in 0..n {
            h[(i, i)] += lambda;
        }
        let candidate = h.cholesky().map(|ch| {
            let delta = ch.solve(&(-&g));
            let y = retract_all(&x, &free, &delta);
            let c = p.cost(&y);
            (delta, y, c)
        });
        match candidate {
            Some((delta, y, c)) if c.is_finite() && c < cost => {
                let ratio = step_ratio(&x, &free, &delta);
                x = y;
                cost = c;
                lambda = (lambda / cfg.down_mult).max(cfg.damp_min);
                for c in cache.iter_mut() {
                    c.exact = false;
                }
                let relin = match cfg.relin_thresholds {
                    Some(th) => {
                        // a factor is relinearized once any of its free variables moved past its threshold
                        let which: Vec<bool> = p
                            .factors
                            .iter()
                            .zip(cache.iter())
                            .map(|(f, c)| {
                                f.keys()
                                    .iter()
                                    .filter(|k| free.contains_key(k))
                                    .any(|&k| c.at.local(k, &x).amax() > th.of(k.kind))
                            })
                            .collect();
                        relinearize(p, &mut cache, &x, &which)
                    }
                    None => {
                        if lin_cost - cost > cfg.jacobian_recompute_ratio * cost.abs() {
                            lin_cost = cost;
                            refresh(p, &mut cache, &x)
                        } else {
                            0
                        }
                    }
                };
                trace.push(LmStep {
                    error: cost,
                    damping: lambda,
                    accepted: true,
                    relinearized: relin,
                });
                if cfg.step_ratio_tol > 0.0 && ratio < cfg.step_ratio_tol {
                    break LmStatus::StepRatio;
                }
                if relin == 0 {
                    no_relin += 1;
                    if cfg.max_no_relin.is_some_and(|m| no_relin >= m) {
                        break LmStatus::NoRelinearization;
                    }
                } else {
                    no_relin = 0;
                }
            }
            _ => {
                let relin = if cache.iter().all(|c| c.exact) {
                    0
                } else {
                    lin_cost = cost;
                    refresh(p, &mut cache, &x)
                };
                trace.push(LmStep {
                    error: cost,
                    damping: lambda,
                    accepted: false,
                    relinearized: relin,
                });
                if relin == 0 && lambda >= cfg.damp_max {
                    break LmStatus::Stalled;
                }
                lambda = (lambda * cfg.up_mult).min(cfg.damp_max);
            }
        }
    };
    Ok(LmResult {
        solution: x,
        initial_error,
        final_error: cost,
        iterations,
        status,
        trace,
    })
}
