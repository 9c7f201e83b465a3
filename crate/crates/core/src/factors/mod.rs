//! Factor objectives with analytic gradients and Gauss-Newton Hessians.
//!
//! Every factor contributes a weighted, non-negative cost. Linearization
//! returns the exact gradient and a Gauss-Newton approximation of the Hessian
//! with respect to the factor's keys: poses through a right-multiplied
//! tangent perturbation `T * exp(xi)` (`xi = [rho, phi]`), scales through their
//! logarithm and codes directly.

mod pair;
mod prior;
mod robust;

pub use pair::{
    fm_objective, gc_objective, rp_objective, smg_objective, FeatureMetricFactor, GcSamples,
    GeometricConsistencyFactor, PairVars, ReprojectionFactor, SparseGeometryFactor,
};
pub use prior::{
    cd_objective, ps_objective, rps_objective, sc_objective, CodeFactor, PoseFactor, RelativePoseScaleFactor,
    RelativeTarget, ScaleFactor,
};
pub use robust::{RobustKernel, RobustKind};

use nalgebra::{DMatrix, DVector};

use crate::geometry::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarKind {
    Pose,
    Scale,
    Code,
}

/// One optimization variable: a block of a keyframe slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarKey {
    pub slot: usize,
    pub kind: VarKind,
}

impl VarKey {
    pub fn pose(slot: usize) -> Self {
        Self {
            slot,
            kind: VarKind::Pose,
        }
    }
    pub fn scale(slot: usize) -> Self {
        Self {
            slot,
            kind: VarKind::Scale,
        }
    }
    pub fn code(slot: usize) -> Self {
        Self {
            slot,
            kind: VarKind::Code,
        }
    }
}

/// Variables of one keyframe. The scale is stored as its logarithm.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotState {
    pub pose: Pose,
    pub log_scale: f64,
    pub code: DVector<f64>,
}

impl SlotState {
    pub fn new(pose: Pose, scale: f64, code: DVector<f64>) -> Self {
        Self {
            pose,
            log_scale: scale.ln(),
            code,
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GraphState {
    pub slots: Vec<SlotState>,
}

impl GraphState {
    pub fn new(slots: Vec<SlotState>) -> Self {
        Self { slots }
    }

    pub fn dim(&self, key: VarKey) -> usize {
        match key.kind {
            VarKind::Pose => 6,
            VarKind::Scale => 1,
            VarKind::Code => self.slots[key.slot].code.len(),
        }
    }

    /// Applies a tangent increment to one variable.
    pub fn retract(&mut self, key: VarKey, delta: &[f64]) {
        let slot = &mut self.slots[key.slot];
        match key.kind {
            VarKind::Pose => {
                let xi = nalgebra::Vector6::from_column_slice(delta);
                slot.pose = slot.pose.retract(&xi);
            }
            VarKind::Scale => slot.log_scale += delta[0],
            VarKind::Code => {
                for (c, d) in slot.code.iter_mut().zip(delta) {
                    *c += d;
                }
            }
        }
    }

    /// Tangent difference `other - self` of one variable.
    pub fn local(&self, key: VarKey, other: &GraphState) -> DVector<f64> {
        let (a, b) = (&self.slots[key.slot], &other.slots[key.slot]);
        match key.kind {
            VarKind::Pose => DVector::from_column_slice(a.pose.local(&b.pose).as_slice()),
            VarKind::Scale => DVector::from_element(1, b.log_scale - a.log_scale),
            VarKind::Code => &b.code - &a.code,
        }
    }
}

/// Cost, gradient and Gauss-Newton Hessian over a factor's keys, in key order.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub cost: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl Linearization {
    pub fn zeros(dim: usize) -> Self {
        Self {
            cost: 0.0,
            gradient: DVector::zeros(dim),
            hessian: DMatrix::zeros(dim, dim),
        }
    }

    /// `w * |r|^2` with residual Jacobian `j`.
    pub fn from_residual(weight: f64, r: &DVector<f64>, j: &DMatrix<f64>) -> Self {
        Self {
            cost: weight * r.norm_squared(),
            gradient: j.tr_mul(r) * (2.0 * weight),
            hessian: j.tr_mul(j) * (2.0 * weight),
        }
    }
}

pub trait Factor: Send + Sync {
    fn name(&self) -> &'static str;
    fn keys(&self) -> &[VarKey];
    fn cost(&self, state: &GraphState) -> f64;
    fn linearize(&self, state: &GraphState) -> Linearization;
}

/// Total dimension of a key list.
pub fn keys_dim(state: &GraphState, keys: &[VarKey]) -> usize {
    keys.iter().map(|&k| state.dim(k)).sum()
}
