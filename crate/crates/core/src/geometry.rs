//! Rigid and similarity transforms in 3D.
//!
//! Poses are stored as a rotation matrix plus translation and act on points as
//! `p' = R p + t`. Tangent vectors are ordered `[rho (translation), phi (rotation)]`
//! and perturbations are applied on the right: `T * exp(xi)`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

/// Angle below which so3 maps switch to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;
/// Distance from pi below which the log uses the symmetric-part branch.
const NEAR_PI: f64 = 1e-3;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues exponential of an axis-angle vector.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation matrix; its norm is the geodesic angle in `[0, pi]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = vee(&(r - r.transpose()));
    // atan2 keeps full precision near both 0 and pi, unlike acos
    let theta = (0.5 * skew.norm()).atan2(cos_theta);
    if theta < SMALL_ANGLE {
        // second order: theta / (2 sin theta) ~ (1 + theta^2 / 6) / 2
        return skew * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if PI - theta < NEAR_PI {
        // (R + R^T)/2 = cos(theta) I + (1 - cos(theta)) a a^T
        let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
        let outer = sym / (1.0 - cos_theta);
        let mut best = 0;
        for i in 1..3 {
            if outer[(i, i)] > outer[(best, best)] {
                best = i;
            }
        }
        let mut axis: Vector3<f64> = outer.column(best).into_owned();
        axis /= axis.norm();
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    skew * (theta / (2.0 * theta.sin()))
}

/// Inverse of the right Jacobian of SO(3): `d log(R exp(d)) / d d` at `d = 0`.
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// Left Jacobian of SO(3), used by the SE(3) exponential.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    so3_log(&(a.transpose() * b)).norm()
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_axis_angle(phi: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(so3_exp(&phi), translation)
    }

    /// Builds a pose from a unit quaternion given as `(x, y, z, w)`.
    pub fn from_quaternion(translation: Vector3<f64>, q: [f64; 4]) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
        Self::new(q.to_rotation_matrix().into_inner(), translation)
    }

    /// Rotation as a unit quaternion `(x, y, z, w)` with non-negative `w`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let c = q.coords;
        let sign = if c.w < 0.0 { -1.0 } else { 1.0 };
        [c.x * sign, c.y * sign, c.z * sign, c.w * sign]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// SE(3) exponential of a twist `[rho, phi]`.
    pub fn exp(xi: &Vector6<f64>) -> Pose {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let phi = Vector3::new(xi[3], xi[4], xi[5]);
        Pose::new(so3_exp(&phi), so3_left_jacobian(&phi) * rho)
    }

    /// SE(3) logarithm, inverse of [`Pose::exp`].
    pub fn log(&self) -> Vector6<f64> {
        let phi = so3_log(&self.rotation);
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
    }

    /// Right perturbation `self * exp(xi)`.
    pub fn retract(&self, xi: &Vector6<f64>) -> Pose {
        self.compose(&Pose::exp(xi))
    }

    /// Tangent vector `xi` with `other = self * exp(xi)`.
    pub fn local(&self, other: &Pose) -> Vector6<f64> {
        self.inverse().compose(other).log()
    }

    pub fn rotation_log(&self) -> Vector3<f64> {
        so3_log(&self.rotation)
    }

    /// Re-projects the rotation onto SO(3) to remove accumulated round-off.
    pub fn orthonormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose::new(r, self.translation)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Similarity transform `p' = s R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// Applies the transform to a camera-to-world pose, keeping the rotation orthonormal.
    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose::new(self.rotation * pose.rotation, self.apply(&pose.translation))
    }
}

/// Closed-form least-squares similarity aligning `src` onto `dst` (Umeyama).
///
/// Returns `None` when fewer than three points are given or the source points
/// are degenerate (all coincident).
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Option<Similarity> {
    let n = src.len();
    if n < 3 || n != dst.len() {
        return None;
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().fold(Vector3::zeros(), |a, p| a + p) * inv_n;
    let mu_d = dst.iter().fold(Vector3::zeros(), |a, p| a + p) * inv_n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let ds = s - mu_s;
        let dd = d - mu_d;
        cov += dd * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;
    if var_s <= f64::EPSILON * (1.0 + mu_s.norm_squared()) {
        return None;
    }
    let svd = cov.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let scale = if with_scale {
        let sv = svd.singular_values;
        (sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)]) / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    Some(Similarity {
        scale,
        rotation,
        translation,
    })
}
