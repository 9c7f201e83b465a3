//! Pose-scale and prior factors: RPS, CD, SC and PS.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{Factor, GraphState, Linearization, VarKey};
use crate::error::{Error, Result};
use crate::geometry::{hat, so3_right_jacobian_inv, Pose};

/// Goal of a relative pose-scale factor: `rel` maps source camera coordinates
/// into target camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeTarget {
    pub rel: Pose,
    pub src_scale: f64,
    pub tgt_scale: f64,
}

// Residual [t/s_src - t~/s~_src; sqrt(w_rot)(log R - log R~); sqrt(w_scl)(log ratio error)]
// and its Jacobian over [src pose, tgt pose, log s_src, log s_tgt].
fn rps_residual(
    src: &Pose,
    log_s_src: f64,
    tgt: &Pose,
    log_s_tgt: f64,
    target: &RelativeTarget,
    w_rot: f64,
    w_scl: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let rel = tgt.inverse() * *src;
    let s_src = log_s_src.exp();
    let (r, t) = (rel.rotation, rel.translation);
    let phi = rel.rotation_log();
    let phi_target = target.rel.rotation_log();
    let (sr, ss) = (w_rot.sqrt(), w_scl.sqrt());

    let mut res = DVector::zeros(7);
    let rt = t / s_src - target.rel.translation / target.src_scale;
    res.fixed_rows_mut::<3>(0).copy_from(&rt);
    res.fixed_rows_mut::<3>(3).copy_from(&((phi - phi_target) * sr));
    res[6] = ss * ((log_s_tgt - log_s_src) - (target.tgt_scale / target.src_scale).ln());

    let jr_inv = so3_right_jacobian_inv(&phi);
    let mut j = DMatrix::zeros(7, 14);
    j.view_mut((0, 0), (3, 3)).copy_from(&(r / s_src));
    j.view_mut((3, 3), (3, 3)).copy_from(&(jr_inv * sr));
    j.view_mut((0, 6), (3, 3)).copy_from(&(-Matrix3::identity() / s_src));
    j.view_mut((0, 9), (3, 3)).copy_from(&(hat(&t) / s_src));
    j.view_mut((3, 9), (3, 3)).copy_from(&(-jr_inv * r.transpose() * sr));
    j.view_mut((0, 12), (3, 1)).copy_from(&(-t / s_src));
    j[(6, 12)] = -ss;
    j[(6, 13)] = ss;
    (res, j)
}

/// Relative pose-scale objective between two keyframes.
pub fn rps_objective(
    src: &Pose,
    src_scale: f64,
    tgt: &Pose,
    tgt_scale: f64,
    target: &RelativeTarget,
    w_rot: f64,
    w_scl: f64,
) -> Result<f64> {
    for s in [src_scale, tgt_scale, target.src_scale, target.tgt_scale] {
        if !(s > 0.0) {
            return Err(Error::Domain(s));
        }
    }
    let (r, _) = rps_residual(src, src_scale.ln(), tgt, tgt_scale.ln(), target, w_rot, w_scl);
    Ok(r.norm_squared())
}

pub struct RelativePoseScaleFactor {
    keys: [VarKey; 4],
    target: RelativeTarget,
    weight: f64,
    w_rot: f64,
    w_scl: f64,
}

impl RelativePoseScaleFactor {
    pub fn new(src_slot: usize, tgt_slot: usize, target: RelativeTarget, weight: f64, w_rot: f64, w_scl: f64) -> Self {
        Self {
            keys: [
                VarKey::pose(src_slot),
                VarKey::pose(tgt_slot),
                VarKey::scale(src_slot),
                VarKey::scale(tgt_slot),
            ],
            target,
            weight,
            w_rot,
            w_scl,
        }
    }

    fn residual(&self, state: &GraphState) -> (DVector<f64>, DMatrix<f64>) {
        let (a, b) = (&state.slots[self.keys[0].slot], &state.slots[self.keys[1].slot]);
        rps_residual(
            &a.pose,
            a.log_scale,
            &b.pose,
            b.log_scale,
            &self.target,
            self.w_rot,
            self.w_scl,
        )
    }
}

impl Factor for RelativePoseScaleFactor {
    fn name(&self) -> &'static str {
        "RPS"
    }
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }
    fn cost(&self, state: &GraphState) -> f64 {
        self.weight * self.residual(state).0.norm_squared()
    }
    fn linearize(&self, state: &GraphState) -> Linearization {
        let (r, j) = self.residual(state);
        Linearization::from_residual(self.weight, &r, &j)
    }
}

/// `(1/B)|c - c~|^2` and its gradient.
pub fn cd_objective(code: &DVector<f64>, target: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    if code.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            actual: code.len(),
        });
    }
    let b = code.len() as f64;
    let d = code - target;
    Ok((d.norm_squared() / b, d * (2.0 / b)))
}

pub struct CodeFactor {
    keys: [VarKey; 1],
    target: DVector<f64>,
    weight: f64,
}

impl CodeFactor {
    pub fn new(slot: usize, target: DVector<f64>, weight: f64) -> Self {
        Self {
            keys: [VarKey::code(slot)],
            target,
            weight,
        }
    }

    fn residual(&self, state: &GraphState) -> (DVector<f64>, DMatrix<f64>) {
        let code = &state.slots[self.keys[0].slot].code;
        let k = 1.0 / (code.len() as f64).sqrt();
        ((code - &self.target) * k, DMatrix::identity(code.len(), code.len()) * k)
    }
}

impl Factor for CodeFactor {
    fn name(&self) -> &'static str {
        "CD"
    }
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }
    fn cost(&self, state: &GraphState) -> f64 {
        self.weight * self.residual(state).0.norm_squared()
    }
    fn linearize(&self, state: &GraphState) -> Linearization {
        let (r, j) = self.residual(state);
        Linearization::from_residual(self.weight, &r, &j)
    }
}

/// `(log s - log s~)^2` and its derivative with respect to `log s`.
pub fn sc_objective(scale: f64, target: f64) -> Result<(f64, f64)> {
    for s in [scale, target] {
        if !(s > 0.0) {
            return Err(Error::Domain(s));
        }
    }
    let d = scale.ln() - target.ln();
    Ok((d * d, 2.0 * d))
}

pub struct ScaleFactor {
    keys: [VarKey; 1],
    log_target: f64,
    weight: f64,
}

impl ScaleFactor {
    pub fn new(slot: usize, target: f64, weight: f64) -> Self {
        Self {
            keys: [VarKey::scale(slot)],
            log_target: target.ln(),
            weight,
        }
    }
}

impl Factor for ScaleFactor {
    fn name(&self) -> &'static str {
        "SC"
    }
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }
    fn cost(&self, state: &GraphState) -> f64 {
        let d = state.slots[self.keys[0].slot].log_scale - self.log_target;
        self.weight * d * d
    }
    fn linearize(&self, state: &GraphState) -> Linearization {
        let d = state.slots[self.keys[0].slot].log_scale - self.log_target;
        Linearization::from_residual(
            self.weight,
            &DVector::from_element(1, d),
            &DMatrix::from_element(1, 1, 1.0),
        )
    }
}

fn ps_residual(pose: &Pose, target: &Pose, w_r: f64) -> (DVector<f64>, DMatrix<f64>) {
    let phi = pose.rotation_log();
    let sr = w_r.sqrt();
    let mut r = DVector::zeros(6);
    r.fixed_rows_mut::<3>(0)
        .copy_from(&(pose.translation - target.translation));
    let dphi: Vector3<f64> = (phi - target.rotation_log()) * sr;
    r.fixed_rows_mut::<3>(3).copy_from(&dphi);
    let mut j = DMatrix::zeros(6, 6);
    j.view_mut((0, 0), (3, 3)).copy_from(&pose.rotation);
    j.view_mut((3, 3), (3, 3))
        .copy_from(&(so3_right_jacobian_inv(&phi) * sr));
    (r, j)
}

/// `|p - p~|^2 + w_r |log R - log R~|^2`.
pub fn ps_objective(pose: &Pose, target: &Pose, w_r: f64) -> f64 {
    ps_residual(pose, target, w_r).0.norm_squared()
}

pub struct PoseFactor {
    keys: [VarKey; 1],
    target: Pose,
    w_r: f64,
    weight: f64,
}

impl PoseFactor {
    pub fn new(slot: usize, target: Pose, w_r: f64, weight: f64) -> Self {
        Self {
            keys: [VarKey::pose(slot)],
            target,
            w_r,
            weight,
        }
    }
}

impl Factor for PoseFactor {
    fn name(&self) -> &'static str {
        "PS"
    }
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }
    fn cost(&self, state: &GraphState) -> f64 {
        self.weight * ps_objective(&state.slots[self.keys[0].slot].pose, &self.target, self.w_r)
    }
    fn linearize(&self, state: &GraphState) -> Linearization {
        let (r, j) = ps_residual(&state.slots[self.keys[0].slot].pose, &self.target, self.w_r);
        Linearization::from_residual(self.weight, &r, &j)
    }
}
