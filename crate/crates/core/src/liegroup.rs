//! Rigid-body transforms on SE(3) with a unit-quaternion rotation.
//!
//! Tangent vectors are ordered `[rot; trans]`. The on-manifold update is a
//! right perturbation, `retract(T, δ) = T · Exp(δ)`, so increments are
//! expressed in the body frame of `T`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};

pub type Vec3 = Vector3<f64>;

const SMALL_ANGLE: f64 = 1e-10;

/// Skew-symmetric cross-product matrix, `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation-vector exponential.
pub fn so3_exp(omega: &Vec3) -> UnitQuaternion<f64> {
    let theta = omega.norm();
    let half = 0.5 * theta;
    let (w, k) = if theta < SMALL_ANGLE {
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, k * omega.x, k * omega.y, k * omega.z))
}

/// Rotation-vector logarithm, angle in `[0, π]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    let q = q.quaternion();
    // shortest path: q and -q are the same rotation
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    if n < SMALL_ANGLE {
        // atan2(n, w) / n ~ 1/w for tiny n
        v * (2.0 / w)
    } else {
        v * (2.0 * n.atan2(w) / n)
    }
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(phi: &Vec3) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let coeff = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - 0.5 * k + coeff * k * k
}

/// The `V` matrix coupling rotation and translation in the SE(3) exponential.
fn se3_v(omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = hat(omega);
    let (a, b) = if theta < 1e-5 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    Matrix3::identity() + a * k + b * k * k
}

fn se3_v_inv(omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = hat(omega);
    let c = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - 0.5 * k + c * k * k
}

/// A twist `[rot; trans]` in radians and meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentVector {
    pub rot: Vec3,
    pub trans: Vec3,
}

impl TangentVector {
    pub fn new(rot: Vec3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    pub fn zero() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_vector6(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector6(&self) -> Vector6<f64> {
        Vector6::new(
            self.rot.x,
            self.rot.y,
            self.rot.z,
            self.trans.x,
            self.trans.y,
            self.trans.z,
        )
    }

    /// Combined norm, mixing radians and meters.
    pub fn norm(&self) -> f64 {
        self.to_vector6().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.rot
            .iter()
            .chain(self.trans.iter())
            .all(|x| x.is_finite())
    }
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        let mut rotation = rotation;
        rotation.renormalize();
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Rotation given as a rotation vector (axis times angle).
    pub fn from_rotation_vector(rot: Vec3, translation: Vec3) -> Self {
        Self::new(so3_exp(&rot), translation)
    }

    /// Builds a pose from quaternion components in `x, y, z, w` order (TUM convention).
    pub fn from_xyzw(translation: Vec3, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        Self::new(
            UnitQuaternion::new_normalize(Quaternion::new(qw, qx, qy, qz)),
            translation,
        )
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> PoseSE3 {
        let inv = self.rotation.inverse();
        PoseSE3::new(inv, -(inv * self.translation))
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn exp(delta: &TangentVector) -> PoseSE3 {
        PoseSE3::new(so3_exp(&delta.rot), se3_v(&delta.rot) * delta.trans)
    }

    pub fn log(&self) -> TangentVector {
        let rot = so3_log(&self.rotation);
        TangentVector::new(rot, se3_v_inv(&rot) * self.translation)
    }

    /// Right perturbation `self · Exp(delta)`.
    pub fn retract(&self, delta: &TangentVector) -> PoseSE3 {
        self.compose(&PoseSE3::exp(delta))
    }

    /// Inverse of [`retract`](Self::retract): `Log(self⁻¹ · other)`.
    pub fn local_coordinates(&self, other: &PoseSE3) -> TangentVector {
        self.inverse().compose(other).log()
    }

    /// Relative-pose error `self ⊖ other`.
    ///
    /// Rotation part is `Log(R_other⁻¹ R_self)`; translation part is the plain
    /// difference `t_self − t_other` expressed in the frame of `other`.
    pub fn ominus(&self, other: &PoseSE3) -> TangentVector {
        let inv = other.rotation.inverse();
        TangentVector::new(
            so3_log(&(inv * self.rotation)),
            inv * (self.translation - other.translation),
        )
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }

    /// Quaternion components as `[x, y, z, w]`.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }
}
