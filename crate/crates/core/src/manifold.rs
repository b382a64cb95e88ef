//! SO(3) and SE(3) primitives.
//!
//! Rotations are stored as orthonormal 3×3 matrices. Tangent vectors are
//! axis-angle 3-vectors. Poses follow the world→body convention used by the
//! estimator: a [`Pose`] holds `R^O_W` and `p^O_W`, so a world point `f`
//! maps into the body frame as `R·f + p`.
//!
//! The pose retraction is decoupled: `(R·Exp(δφ), p + R·δp)`.

use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::Real;

/// Axis-angle tangent vector of SO(3), in radians.
pub type AxisAngle<T> = Vector3<T>;

/// Orthogonality defect above which [`Rotation::renormalized`] projects back onto SO(3).
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-9;

/// Maps `ξ` to the skew-symmetric matrix with `hat(ξ)·v = ξ × v`.
#[inline]
pub fn hat<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Inverse of [`hat`]; reads the off-diagonal entries of the skew-symmetric part.
#[inline]
pub fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let half = T::lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * half,
        (m[(0, 2)] - m[(2, 0)]) * half,
        (m[(1, 0)] - m[(0, 1)]) * half,
    )
}

/// A 3-D rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation<T: Real>(Matrix3<T>);

impl<T: Real> Default for Rotation<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        Self(m)
    }

    /// Projects an arbitrary matrix onto the nearest rotation (Frobenius norm).
    pub fn from_matrix_projected(m: &Matrix3<T>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut r = u * v_t;
        if r.determinant() < T::zero() {
            let mut u_fixed = u;
            for i in 0..3 {
                u_fixed[(i, 2)] = -u_fixed[(i, 2)];
            }
            r = u_fixed * v_t;
        }
        Self(r)
    }

    /// Rotation by `angle` radians about the z axis.
    pub fn about_z(angle: T) -> Self {
        Self::exp(&Vector3::new(T::zero(), T::zero(), angle))
    }

    #[inline]
    pub fn exp(xi: &AxisAngle<T>) -> Self {
        exp_so3(xi)
    }

    #[inline]
    pub fn log(&self) -> AxisAngle<T> {
        log_so3(self)
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    #[inline]
    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> T {
        self.log().norm()
    }

    /// Largest absolute entry of `R·Rᵀ − I`.
    pub fn orthogonality_defect(&self) -> T {
        (self.0 * self.0.transpose() - Matrix3::identity()).amax()
    }

    /// Nearest-rotation projection, applied only when the defect exceeds
    /// [`ORTHOGONALITY_TOLERANCE`].
    pub fn renormalized(self) -> Self {
        if self.orthogonality_defect() > T::lit(ORTHOGONALITY_TOLERANCE) {
            Self::from_matrix_projected(&self.0)
        } else {
            self
        }
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<T> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0))
    }

    pub fn from_quaternion(q: &UnitQuaternion<T>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    pub fn cast<U: Real>(&self) -> Rotation<U> {
        Rotation(self.0.map(|v| U::lit(v.as_f64())))
    }
}

impl<T: Real> Mul for Rotation<T> {
    type Output = Rotation<T>;
    #[inline]
    fn mul(self, rhs: Rotation<T>) -> Rotation<T> {
        Rotation(self.0 * rhs.0)
    }
}

impl<T: Real> Mul<Vector3<T>> for Rotation<T> {
    type Output = Vector3<T>;
    #[inline]
    fn mul(self, rhs: Vector3<T>) -> Vector3<T> {
        self.0 * rhs
    }
}

impl<T: Real> Mul<&Vector3<T>> for &Rotation<T> {
    type Output = Vector3<T>;
    #[inline]
    fn mul(self, rhs: &Vector3<T>) -> Vector3<T> {
        self.0 * rhs
    }
}

/// Exponential map (Rodrigues). Second-order Taylor expansion near zero.
pub fn exp_so3<T: Real>(xi: &AxisAngle<T>) -> Rotation<T> {
    let theta = xi.norm();
    let k = hat(xi);
    let k2 = k * k;
    let (a, b) = if theta < T::small_angle() {
        let t2 = theta * theta;
        (
            T::one() - t2 / T::lit(6.0),
            T::lit(0.5) - t2 / T::lit(24.0),
        )
    } else {
        (
            theta.sin() / theta,
            (T::one() - theta.cos()) / (theta * theta),
        )
    };
    Rotation(Matrix3::identity() + k * a + k2 * b)
}

/// Logarithm map returning `ξ` with `‖ξ‖ ≤ π`.
///
/// Near `θ = π` the axis is read from the symmetric part of `R`; when the
/// antisymmetric part carries no sign information the axis is oriented so
/// that its first nonzero component is positive.
pub fn log_so3<T: Real>(r: &Rotation<T>) -> AxisAngle<T> {
    let m = &r.0;
    let half = T::lit(0.5);
    let cos_theta = ((m.trace() - T::one()) * half).clamp(-T::one(), T::one());
    // w = sin(θ)·axis
    let w = vee(m);
    let sin_theta = w.norm();
    let theta = sin_theta.atan2(cos_theta);

    if theta < T::small_angle() {
        // θ/sinθ ≈ 1 + θ²/6
        return w * (T::one() + theta * theta / T::lit(6.0));
    }
    if cos_theta > T::lit(-0.99) {
        return w * (theta / sin_theta);
    }

    // Near π: (R + Rᵀ)/2 − cosθ·I = (1 − cosθ)·a·aᵀ.
    let sym = (m + m.transpose()) * half - Matrix3::identity() * cos_theta;
    let scale = T::one() - cos_theta;
    let aat = sym / scale;
    let mut best = 0;
    for i in 1..3 {
        if aat[(i, i)] > aat[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<T> = aat.column(best).into_owned();
    axis /= axis.norm();
    let dot = axis.dot(&w);
    let eps = T::default_epsilon() * T::lit(16.0);
    if dot < -eps {
        axis = -axis;
    } else if dot.abs() <= eps {
        let first = axis.iter().copied().find(|v| v.abs() > eps).unwrap_or(T::one());
        if first < T::zero() {
            axis = -axis;
        }
    }
    axis * theta
}

/// Right Jacobian of SO(3): `Exp(ξ + δ) ≈ Exp(ξ)·Exp(J_r(ξ)·δ)`.
pub fn right_jacobian<T: Real>(xi: &AxisAngle<T>) -> Matrix3<T> {
    let theta = xi.norm();
    let k = hat(xi);
    let k2 = k * k;
    let (a, b) = if theta < T::small_angle() {
        let t2 = theta * theta;
        (
            T::lit(0.5) - t2 / T::lit(24.0) + t2 * t2 / T::lit(720.0),
            T::lit(1.0 / 6.0) - t2 / T::lit(120.0) + t2 * t2 / T::lit(5040.0),
        )
    } else {
        let t2 = theta * theta;
        (
            (T::one() - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    Matrix3::identity() - k * a + k2 * b
}

/// Inverse of [`right_jacobian`], used when differentiating `Log`.
pub fn right_jacobian_inv<T: Real>(xi: &AxisAngle<T>) -> Matrix3<T> {
    let theta = xi.norm();
    let k = hat(xi);
    let k2 = k * k;
    let c = if theta < T::small_angle() {
        let t2 = theta * theta;
        T::lit(1.0 / 12.0) + t2 / T::lit(720.0) + t2 * t2 / T::lit(30240.0)
    } else {
        T::one() / (theta * theta)
            - (T::one() + theta.cos()) / (T::lit(2.0) * theta * theta.sin())
    };
    Matrix3::identity() + k * T::lit(0.5) + k2 * c
}

/// Rigid transform in the world→body convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T: Real> {
    pub rotation: Rotation<T>,
    pub position: Vector3<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: Rotation<T>, position: Vector3<T>) -> Self {
        Self { rotation, position }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    /// World→body pose of a planar robot at `(x, y)` with heading `yaw`.
    pub fn from_planar(x: T, y: T, yaw: T) -> Self {
        let r_wb = Rotation::about_z(yaw);
        let r_bw = r_wb.transpose();
        let p = -(r_bw * Vector3::new(x, y, T::zero()));
        Self::new(r_bw, p)
    }

    /// Builds the world→body pose from the body's world orientation and position.
    pub fn from_world(r_wb: Rotation<T>, center: Vector3<T>) -> Self {
        let r_bw = r_wb.transpose();
        let p = -(r_bw * center);
        Self::new(r_bw, p)
    }

    /// Body origin expressed in the world frame, `−Rᵀ·p`.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.position)
    }

    /// Orientation of the body in the world frame, `Rᵀ`.
    pub fn world_rotation(&self) -> Rotation<T> {
        self.rotation.transpose()
    }

    /// Maps a world point into the body frame.
    pub fn transform(&self, f_w: &Vector3<T>) -> Vector3<T> {
        self.rotation * *f_w + self.position
    }

    /// Retraction `(R·Exp(δφ), p + R·δp)`.
    pub fn retract(&self, dphi: &Vector3<T>, dp: &Vector3<T>) -> Self {
        retract_pose(self, dphi, dp)
    }

    /// Relative motion `(ΔR, Δp)` from `self` (frame i) to `other` (frame j),
    /// expressed in frame i: `ΔR = R_i·R_jᵀ`, `Δp = −R_i·R_jᵀ·p_j + p_i`.
    pub fn relative_to(&self, other: &Pose<T>) -> (Rotation<T>, Vector3<T>) {
        let d_r = self.rotation * other.rotation.transpose();
        let d_p = -(d_r * other.position) + self.position;
        (d_r, d_p)
    }

    /// Applies a relative motion `(ΔR, Δp)` expressed in this frame, giving
    /// the pose of the following frame. Inverse of [`Pose::relative_to`].
    pub fn compose_relative(&self, d_r: &Rotation<T>, d_p: &Vector3<T>) -> Self {
        let r_j = (d_r.transpose() * self.rotation).renormalized();
        let p_j = d_r.transpose() * (self.position - d_p);
        Self::new(r_j, p_j)
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose::new(self.rotation.cast(), self.position.map(|v| U::lit(v.as_f64())))
    }
}

/// Retraction on the decoupled rotation/translation parameterization.
pub fn retract_pose<T: Real>(pose: &Pose<T>, dphi: &Vector3<T>, dp: &Vector3<T>) -> Pose<T> {
    Pose::new(
        pose.rotation * exp_so3(dphi),
        pose.position + pose.rotation * *dp,
    )
}
