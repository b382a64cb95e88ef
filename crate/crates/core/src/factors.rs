//! Residuals and analytic Jacobians of the estimator's factors.
//!
//! Every frame variable has the 9-dimensional tangent `(δφ, δp, δb_g)` with
//! the retraction `R ← R·Exp(δφ)`, `p ← p + R·δp`, `b ← b + δb`. Landmarks
//! are world points with an additive 3-dimensional tangent.

use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Matrix6, SMatrix, SVector, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::manifold::{exp_so3, hat, log_so3, right_jacobian, right_jacobian_inv, Pose, Rotation};
use crate::preintegration::PreintegratedOdometer;
use crate::sensors::{CameraModel, Extrinsics, SensorError, DEPTH_EPSILON};
use crate::Real;

pub type Vector9<T> = SVector<T, 9>;
pub type Matrix9<T> = SMatrix<T, 9, 9>;

/// Huber threshold applied to reprojection factors (95% of χ²(2), as a distance).
pub const HUBER_DELTA: f64 = 2.447;
/// χ²(2) 95% bound used to classify reprojection outliers.
pub const CHI2_OUTLIER: f64 = 5.991;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
}

/// Odometer pose plus gyro bias.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct FrameState<T: Real> {
    pub pose: Pose<T>,
    pub bias: Vector3<T>,
}

impl<T: Real> FrameState<T> {
    pub fn new(pose: Pose<T>, bias: Vector3<T>) -> Self {
        Self { pose, bias }
    }

    pub fn identity() -> Self {
        Self::new(Pose::identity(), Vector3::zeros())
    }

    pub fn retract(&self, delta: &Vector9<T>) -> Self {
        let dphi = delta.fixed_rows::<3>(0).into_owned();
        let dp = delta.fixed_rows::<3>(3).into_owned();
        let db = delta.fixed_rows::<3>(6).into_owned();
        Self::new(self.pose.retract(&dphi, &dp), self.bias + db)
    }

    pub fn cast<U: Real>(&self) -> FrameState<U> {
        FrameState::new(self.pose.cast(), self.bias.map(|v| U::lit(v.as_f64())))
    }
}

/// Gaussian prior on a frame, with information expressed on the prior residual.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorState<T: Real> {
    pub mean: FrameState<T>,
    pub information: Matrix9<T>,
}

impl<T: Real> PriorState<T> {
    /// Builds a prior from a tangent-space information matrix at `mean`.
    ///
    /// At the mean the prior residual has Jacobian `diag(I, R, I)`, so the
    /// information is congruence-transformed by its inverse transpose.
    pub fn from_tangent_information(mean: FrameState<T>, tangent_info: &Matrix9<T>) -> Self {
        let mut t = Matrix9::<T>::identity();
        t.fixed_view_mut::<3, 3>(3, 3).copy_from(mean.pose.rotation.matrix());
        let info = t * tangent_info * t.transpose();
        Self {
            mean,
            information: (info + info.transpose()) * T::lit(0.5),
        }
    }
}

/// Residual, Jacobians and information of one linearized factor with
/// `R` residual rows. Up to two frame blocks and one landmark block.
#[derive(Clone, Debug)]
pub struct Linearized<T: Real, const R: usize> {
    pub residual: SVector<T, R>,
    pub information: SMatrix<T, R, R>,
    pub frames: [Option<(usize, SMatrix<T, R, 9>)>; 2],
    pub landmark: Option<(usize, SMatrix<T, R, 3>)>,
}

/// A factor in the estimation graph, keyed by frame and landmark ids.
#[derive(Clone, Debug)]
pub enum Factor<T: Real> {
    /// Preintegrated odometer between frames `i` and `j`.
    Odometer {
        i: usize,
        j: usize,
        preint: Arc<PreintegratedOdometer<T>>,
    },
    /// Gyro-bias random walk between frames `i` and `j`.
    BiasWalk {
        i: usize,
        j: usize,
        information: Matrix3<T>,
    },
    /// Pixel observation of `landmark` in `frame`.
    Reprojection {
        frame: usize,
        landmark: usize,
        pixel: Vector2<T>,
        information: Matrix2<T>,
        huber: Option<T>,
    },
    /// Roll, pitch and height of `frame` relative to the `anchor` frame.
    Plane {
        frame: usize,
        anchor: usize,
        information: Matrix3<T>,
    },
    Prior {
        frame: usize,
        prior: Arc<PriorState<T>>,
    },
}

impl<T: Real> Factor<T> {
    pub fn dim(&self) -> usize {
        match self {
            Factor::Odometer { .. } => 6,
            Factor::BiasWalk { .. } | Factor::Plane { .. } => 3,
            Factor::Reprojection { .. } => 2,
            Factor::Prior { .. } => 9,
        }
    }

    pub fn huber(&self) -> Option<T> {
        match self {
            Factor::Reprojection { huber, .. } => *huber,
            _ => None,
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> {
        let ids = match self {
            Factor::Odometer { i, j, .. } | Factor::BiasWalk { i, j, .. } => [Some(*i), Some(*j)],
            Factor::Reprojection { frame, .. } | Factor::Prior { frame, .. } => [Some(*frame), None],
            Factor::Plane { frame, anchor, .. } => [Some(*frame), Some(*anchor)],
        };
        ids.into_iter().flatten()
    }

    pub fn landmark(&self) -> Option<usize> {
        match self {
            Factor::Reprojection { landmark, .. } => Some(*landmark),
            _ => None,
        }
    }
}

/// Bias-walk information for an interval of `dt` seconds.
pub fn bias_walk_information<T: Real>(bias_walk: &Matrix3<T>, dt: T) -> Result<Matrix3<T>, FactorError> {
    (bias_walk * dt)
        .try_inverse()
        .ok_or(FactorError::NotPositiveDefinite)
}

/// Odometer residual `(r_ΔR, r_Δp)` and Jacobians with respect to `x_i`, `x_j`.
pub fn odometer_residual<T: Real>(
    xi: &FrameState<T>,
    xj: &FrameState<T>,
    preint: &PreintegratedOdometer<T>,
) -> (Vector6<T>, SMatrix<T, 6, 9>, SMatrix<T, 6, 9>) {
    let ri = *xi.pose.rotation.matrix();
    let rj = *xj.pose.rotation.matrix();
    let db = xi.bias - preint.bias_ref;
    let jb_db = preint.d_r_d_bg * db;
    let meas_r = preint.delta_r * exp_so3(&jb_db);
    let rel = rj * ri.transpose();
    let r_rot = log_so3(&Rotation::from_matrix_unchecked(meas_r.matrix() * rel));
    let c_j = rj.transpose() * xj.pose.position;
    let r_pos = -(ri * c_j) + xi.pose.position - (preint.delta_p + preint.d_p_d_bg * db);

    let jr_inv = right_jacobian_inv(&r_rot);
    let mut ji = SMatrix::<T, 6, 9>::zeros();
    let mut jj = SMatrix::<T, 6, 9>::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-(jr_inv * ri)));
    ji.fixed_view_mut::<3, 3>(0, 6)
        .copy_from(&(jr_inv * ri * rj.transpose() * right_jacobian(&jb_db) * preint.d_r_d_bg));
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr_inv * ri));

    let ri_cj = ri * hat(&c_j);
    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&ri_cj);
    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&ri);
    ji.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-preint.d_p_d_bg));
    jj.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ri_cj));
    jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-ri));

    let r = Vector6::new(r_rot.x, r_rot.y, r_rot.z, r_pos.x, r_pos.y, r_pos.z);
    (r, ji, jj)
}

/// Information of the odometer residual for a bias estimate `bias_i`.
///
/// The rotation residual carries the measurement on the left, so a
/// measurement error `ΔR̃ = ΔR·Exp(δφ)` shows up as `ΔR̃·δφ`, and the position
/// residual carries `−δp`. The preintegrated covariance is mapped accordingly.
pub fn odometer_information<T: Real>(
    preint: &PreintegratedOdometer<T>,
    bias_i: &Vector3<T>,
) -> Result<Matrix6<T>, FactorError> {
    let (meas_r, _) = preint.correct_for_bias(bias_i);
    let mut t = Matrix6::<T>::zeros();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(meas_r.matrix());
    t.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-Matrix3::identity()));
    let cov = t * preint.cov * t.transpose();
    let info = cov
        .cholesky()
        .ok_or(FactorError::NotPositiveDefinite)?
        .inverse();
    Ok((info + info.transpose()) * T::lit(0.5))
}

/// Gyro-bias random-walk residual `b_j − b_i`.
pub fn bias_residual<T: Real>(
    xi: &FrameState<T>,
    xj: &FrameState<T>,
) -> (Vector3<T>, SMatrix<T, 3, 9>, SMatrix<T, 3, 9>) {
    let mut ji = SMatrix::<T, 3, 9>::zeros();
    let mut jj = SMatrix::<T, 3, 9>::zeros();
    ji.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-Matrix3::identity()));
    jj.fixed_view_mut::<3, 3>(0, 6).copy_from(&Matrix3::identity());
    (xj.bias - xi.bias, ji, jj)
}

/// Reprojection residual `π(x, f) − z` with Jacobians for the frame and the landmark.
pub fn reprojection_residual<T: Real>(
    x: &FrameState<T>,
    landmark: &Vector3<T>,
    pixel: &Vector2<T>,
    ext: &Extrinsics<T>,
    cam: &CameraModel<T>,
) -> Result<(Vector2<T>, SMatrix<T, 2, 9>, SMatrix<T, 2, 3>), SensorError> {
    let r = *x.pose.rotation.matrix();
    let rco = *ext.r_c_o.matrix();
    let p_c = rco * (r * landmark + x.pose.position) + ext.p_c_o;
    if p_c.z <= T::lit(DEPTH_EPSILON) {
        return Err(SensorError::BehindCamera { depth: p_c.z.as_f64() });
    }
    let iz = T::one() / p_c.z;
    let proj = Vector2::new(cam.fx * p_c.x * iz + cam.cx, cam.fy * p_c.y * iz + cam.cy);
    let dpi = SMatrix::<T, 2, 3>::new(
        cam.fx * iz,
        T::zero(),
        -cam.fx * p_c.x * iz * iz,
        T::zero(),
        cam.fy * iz,
        -cam.fy * p_c.y * iz * iz,
    );
    let rco_r = rco * r;
    let mut jx = SMatrix::<T, 2, 9>::zeros();
    jx.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * (-(rco_r * hat(landmark)))));
    jx.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dpi * rco_r));
    let jf = dpi * rco_r;
    Ok((proj - pixel, jx, jf))
}

/// Plane residual of frame `k` relative to the anchor frame `1`.
///
/// Components: the x and y coordinates of the anchor's ground normal seen
/// from frame `k`, and the height of frame `k`'s origin above the anchor.
pub fn plane_residual<T: Real>(
    xk: &FrameState<T>,
    x1: &FrameState<T>,
) -> (Vector3<T>, SMatrix<T, 3, 9>, SMatrix<T, 3, 9>) {
    let rk = *xk.pose.rotation.matrix();
    let r1 = *x1.pose.rotation.matrix();
    let e3 = Vector3::z();
    let n1 = r1.transpose() * e3;
    let n_k = rk * n1;
    let c_k = rk.transpose() * xk.pose.position;
    let height = (-(r1 * c_k) + x1.pose.position).z;

    let mut jk = SMatrix::<T, 3, 9>::zeros();
    let mut j1 = SMatrix::<T, 3, 9>::zeros();
    let rk_n1 = rk * hat(&n1);
    jk.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-rk_n1).fixed_rows::<2>(0));
    j1.fixed_view_mut::<2, 3>(0, 0).copy_from(&rk_n1.fixed_rows::<2>(0));
    let r1_ck = r1 * hat(&c_k);
    jk.fixed_view_mut::<1, 3>(2, 0).copy_from(&(-r1_ck).row(2));
    jk.fixed_view_mut::<1, 3>(2, 3).copy_from(&(-r1).row(2));
    j1.fixed_view_mut::<1, 3>(2, 0).copy_from(&r1_ck.row(2));
    j1.fixed_view_mut::<1, 3>(2, 3).copy_from(&r1.row(2));
    (Vector3::new(n_k.x, n_k.y, height), jk, j1)
}

/// Prior residual `(Log(R̃ᵀR), p − p̃, b − b̃)` and its Jacobian.
pub fn prior_residual<T: Real>(x: &FrameState<T>, prior: &PriorState<T>) -> (Vector9<T>, Matrix9<T>) {
    let m = &prior.mean;
    let r_rot = log_so3(&(m.pose.rotation.transpose() * x.pose.rotation));
    let r_pos = x.pose.position - m.pose.position;
    let r_b = x.bias - m.bias;
    let mut r = Vector9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(3).copy_from(&r_pos);
    r.fixed_rows_mut::<3>(6).copy_from(&r_b);
    let mut j = Matrix9::<T>::identity();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&right_jacobian_inv(&r_rot));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(x.pose.rotation.matrix());
    (r, j)
}

/// Huber IRLS weight for a squared Mahalanobis distance `s`.
pub fn huber_weight<T: Real>(s: T, delta: T) -> T {
    let e = s.sqrt();
    if e <= delta {
        T::one()
    } else {
        delta / e
    }
}

/// Huber cost `ρ(s)`: `s` inside the threshold, `2δ√s − δ²` outside.
pub fn huber_cost<T: Real>(s: T, delta: T) -> T {
    let e = s.sqrt();
    if e <= delta {
        s
    } else {
        T::lit(2.0) * delta * e - delta * delta
    }
}

/// Context needed to evaluate reprojection factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration<T: Real> {
    pub ext: Extrinsics<T>,
    pub cam: CameraModel<T>,
}

/// Looks up frame and landmark values while evaluating factors.
pub trait VariableLookup<T: Real> {
    fn frame(&self, id: usize) -> &FrameState<T>;
    fn landmark(&self, id: usize) -> &Vector3<T>;
}

/// Evaluated factor of any kind, sized dynamically only at this boundary.
pub enum AnyLinearized<T: Real> {
    Two(Linearized<T, 2>),
    Three(Linearized<T, 3>),
    Six(Linearized<T, 6>),
    Nine(Linearized<T, 9>),
}

impl<T: Real> Factor<T> {
    /// Linearizes at the current values. Fails only for landmarks behind the
    /// camera or a non-invertible odometer covariance.
    pub fn linearize(
        &self,
        vars: &impl VariableLookup<T>,
        calib: &Calibration<T>,
    ) -> Result<AnyLinearized<T>, FactorError> {
        Ok(match self {
            Factor::Odometer { i, j, preint } => {
                let xi = vars.frame(*i);
                let (r, ji, jj) = odometer_residual(xi, vars.frame(*j), preint);
                AnyLinearized::Six(Linearized {
                    residual: r,
                    information: odometer_information(preint, &xi.bias)?,
                    frames: [Some((*i, ji)), Some((*j, jj))],
                    landmark: None,
                })
            }
            Factor::BiasWalk { i, j, information } => {
                let (r, ji, jj) = bias_residual(vars.frame(*i), vars.frame(*j));
                AnyLinearized::Three(Linearized {
                    residual: r,
                    information: *information,
                    frames: [Some((*i, ji)), Some((*j, jj))],
                    landmark: None,
                })
            }
            Factor::Reprojection {
                frame,
                landmark,
                pixel,
                information,
                ..
            } => {
                let (r, jx, jf) = reprojection_residual(
                    vars.frame(*frame),
                    vars.landmark(*landmark),
                    pixel,
                    &calib.ext,
                    &calib.cam,
                )?;
                AnyLinearized::Two(Linearized {
                    residual: r,
                    information: *information,
                    frames: [Some((*frame, jx)), None],
                    landmark: Some((*landmark, jf)),
                })
            }
            Factor::Plane {
                frame,
                anchor,
                information,
            } => {
                let (r, jk, j1) = plane_residual(vars.frame(*frame), vars.frame(*anchor));
                AnyLinearized::Three(Linearized {
                    residual: r,
                    information: *information,
                    frames: [Some((*frame, jk)), Some((*anchor, j1))],
                    landmark: None,
                })
            }
            Factor::Prior { frame, prior } => {
                let (r, j) = prior_residual(vars.frame(*frame), prior);
                AnyLinearized::Nine(Linearized {
                    residual: r,
                    information: prior.information,
                    frames: [Some((*frame, j)), None],
                    landmark: None,
                })
            }
        })
    }

    /// Squared Mahalanobis norm `rᵀΩr` at the current values.
    pub fn chi2(&self, vars: &impl VariableLookup<T>, calib: &Calibration<T>) -> Result<T, FactorError> {
        if let Factor::Reprojection { frame, landmark, pixel, information, .. } = self {
            let x = vars.frame(*frame);
            let p_c = calib.ext.camera_pose(&x.pose).transform(vars.landmark(*landmark));
            let r = calib.cam.project_camera_point(&p_c)? - pixel;
            return Ok((r.transpose() * information * r)[(0, 0)]);
        }
        Ok(match self.linearize(vars, calib)? {
            AnyLinearized::Two(l) => l.chi2(),
            AnyLinearized::Three(l) => l.chi2(),
            AnyLinearized::Six(l) => l.chi2(),
            AnyLinearized::Nine(l) => l.chi2(),
        })
    }
}

impl<T: Real, const R: usize> Linearized<T, R> {
    pub fn chi2(&self) -> T {
        (self.residual.transpose() * self.information * self.residual)[(0, 0)]
    }
}
