//! Measurement records, noise model, calibration and camera projection.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{Pose, Rotation};
use crate::Real;

/// Minimum camera-frame depth for a point to count as in front of the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("timestamps must be strictly increasing (at index {index})")]
    NonMonotonicTimestamps { index: usize },
}

/// Gyroscope reading: `ω̃ = ω + b_g + η_gd`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GyroSample<T: Real> {
    pub timestamp: f64,
    pub omega: Vector3<T>,
}

/// Wheel distances travelled since the previous sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WheelSample<T: Real> {
    pub timestamp: f64,
    pub dist_left: T,
    pub dist_right: T,
}

/// A pixel measurement of one landmark in one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureObservation<T: Real> {
    pub frame: usize,
    pub landmark: usize,
    pub pixel: Vector2<T>,
}

/// One preintegration step: a wheel interval with its zero-order-held gyro rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdometerStep<T: Real> {
    /// End of the interval, seconds.
    pub timestamp: f64,
    pub omega: Vector3<T>,
    pub dist_left: T,
    pub dist_right: T,
    pub dt: T,
}

/// Sensor noise covariances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams<T: Real> {
    /// Σ_gd, discrete gyro noise per sample (rad²/s²).
    pub gyro: Matrix3<T>,
    /// Σ_ed, per-wheel distance variance per sample (m²).
    pub encoder: T,
    /// Σ_bgd, gyro bias random walk per second of elapsed time (rad²/s²/s).
    pub bias_walk: Matrix3<T>,
    /// Σ_pl for (roll, pitch, z) relative to the ground plane.
    pub plane: Matrix3<T>,
    /// Σ_C, pixel covariance.
    pub pixel: Matrix2<T>,
    /// Variance placed on the lateral/vertical components of the wheel displacement.
    pub lateral_floor: T,
}

impl<T: Real> NoiseParams<T> {
    /// Builds isotropic covariances from standard deviations.
    pub fn from_sigmas(
        sigma_gyro: T,
        sigma_encoder: T,
        sigma_bias_walk: T,
        sigma_plane_rot: T,
        sigma_plane_z: T,
        sigma_pixel: T,
    ) -> Self {
        Self {
            gyro: Matrix3::identity() * (sigma_gyro * sigma_gyro),
            encoder: sigma_encoder * sigma_encoder,
            bias_walk: Matrix3::identity() * (sigma_bias_walk * sigma_bias_walk),
            plane: Matrix3::from_diagonal(&Vector3::new(
                sigma_plane_rot * sigma_plane_rot,
                sigma_plane_rot * sigma_plane_rot,
                sigma_plane_z * sigma_plane_z,
            )),
            pixel: Matrix2::identity() * (sigma_pixel * sigma_pixel),
            lateral_floor: T::lit(1e-8),
        }
    }

    /// All covariances zero, including the lateral floor.
    pub fn zero() -> Self {
        Self {
            gyro: Matrix3::zeros(),
            encoder: T::zero(),
            bias_walk: Matrix3::zeros(),
            plane: Matrix3::zeros(),
            pixel: Matrix2::zeros(),
            lateral_floor: T::zero(),
        }
    }

    /// Σ_ψd: the two wheels are independent with equal variance, so the mean
    /// distance carries Σ_ed/2 on x.
    pub fn displacement_cov(&self) -> Matrix3<T> {
        Matrix3::from_diagonal(&Vector3::new(
            self.encoder * T::lit(0.5),
            self.lateral_floor,
            self.lateral_floor,
        ))
    }

    pub fn cast<U: Real>(&self) -> NoiseParams<U> {
        let c = |v: T| U::lit(v.as_f64());
        NoiseParams {
            gyro: self.gyro.map(c),
            encoder: c(self.encoder),
            bias_walk: self.bias_walk.map(c),
            plane: self.plane.map(c),
            pixel: self.pixel.map(c),
            lateral_floor: c(self.lateral_floor),
        }
    }
}

/// Rigid calibration between odometer, camera and gyroscope.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics<T: Real> {
    /// R^C_O: odometer → camera.
    pub r_c_o: Rotation<T>,
    /// p^C_O: odometer origin in the camera frame.
    pub p_c_o: Vector3<T>,
    /// R^O_B: gyroscope → odometer.
    pub r_o_b: Rotation<T>,
}

impl<T: Real> Default for Extrinsics<T> {
    fn default() -> Self {
        Self {
            r_c_o: Rotation::identity(),
            p_c_o: Vector3::zeros(),
            r_o_b: Rotation::identity(),
        }
    }
}

/// Where the camera points on the robot body (x forward, y left, z up).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CameraMount {
    #[default]
    Forward,
    Upward,
}

impl<T: Real> Extrinsics<T> {
    /// Camera mounted at `offset` (odometer frame) with the given orientation.
    pub fn mounted(mount: CameraMount, offset: Vector3<T>) -> Self {
        let (o, l) = (T::zero(), T::one());
        let r_c_o = match mount {
            // camera z = body x, camera x = −body y, camera y = −body z
            CameraMount::Forward => Matrix3::new(o, -l, o, o, o, -l, l, o, o),
            // camera z = body z, camera x = −body y, camera y = body x
            CameraMount::Upward => Matrix3::new(o, -l, o, l, o, o, o, o, l),
        };
        let r_c_o = Rotation::from_matrix_unchecked(r_c_o);
        Self {
            r_c_o,
            p_c_o: -(r_c_o * offset),
            r_o_b: Rotation::identity(),
        }
    }

    /// World→camera pose for an odometer pose.
    pub fn camera_pose(&self, body: &Pose<T>) -> Pose<T> {
        Pose::new(
            self.r_c_o * body.rotation,
            self.r_c_o * body.position + self.p_c_o,
        )
    }

    pub fn cast<U: Real>(&self) -> Extrinsics<U> {
        Extrinsics {
            r_c_o: self.r_c_o.cast(),
            p_c_o: self.p_c_o.map(|v| U::lit(v.as_f64())),
            r_o_b: self.r_o_b.cast(),
        }
    }
}

/// Ideal pinhole camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: T,
    pub height: T,
}

impl<T: Real> CameraModel<T> {
    pub fn in_bounds(&self, pixel: &Vector2<T>) -> bool {
        pixel.x >= T::zero() && pixel.y >= T::zero() && pixel.x < self.width && pixel.y < self.height
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project_camera_point(&self, p_c: &Vector3<T>) -> Result<Vector2<T>, SensorError> {
        if p_c.z <= T::lit(DEPTH_EPSILON) {
            return Err(SensorError::BehindCamera { depth: p_c.z.as_f64() });
        }
        Ok(Vector2::new(
            self.fx * p_c.x / p_c.z + self.cx,
            self.fy * p_c.y / p_c.z + self.cy,
        ))
    }

    /// Camera-frame point at `depth` along the ray through `pixel`.
    pub fn backproject(&self, pixel: &Vector2<T>, depth: T) -> Vector3<T> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Unit-depth bearing `(x/z, y/z, 1)` of a pixel.
    pub fn bearing(&self, pixel: &Vector2<T>) -> Vector3<T> {
        self.backproject(pixel, T::one())
    }

    pub fn cast<U: Real>(&self) -> CameraModel<U> {
        let c = |v: T| U::lit(v.as_f64());
        CameraModel {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: c(self.width),
            height: c(self.height),
        }
    }
}

/// Measured body displacement `ψ̃ = ((Dl + Dr)/2, 0, 0)`.
#[inline]
pub fn wheel_displacement<T: Real>(s: &WheelSample<T>) -> Vector3<T> {
    displacement(s.dist_left, s.dist_right)
}

#[inline]
pub(crate) fn displacement<T: Real>(dl: T, dr: T) -> Vector3<T> {
    Vector3::new((dl + dr) * T::lit(0.5), T::zero(), T::zero())
}

impl<T: Real> OdometerStep<T> {
    pub fn displacement(&self) -> Vector3<T> {
        displacement(self.dist_left, self.dist_right)
    }
}

/// Projects a world point through body pose and extrinsics into pixels.
pub fn project<T: Real>(
    f_w: &Vector3<T>,
    pose: &Pose<T>,
    ext: &Extrinsics<T>,
    cam: &CameraModel<T>,
) -> Result<Vector2<T>, SensorError> {
    let p_c = ext.r_c_o * pose.transform(f_w) + ext.p_c_o;
    cam.project_camera_point(&p_c)
}

/// Merges gyro and wheel streams into preintegration steps.
///
/// Each wheel interval `(t_{k−1}, t_k]` becomes one step whose rate is the
/// latest gyro sample at or before the interval start (zero-order hold).
/// The first wheel sample only opens the stream. Gyro samples before the
/// first interval are used for the hold; if none exists the first gyro
/// sample is used.
pub fn merge_streams<T: Real>(
    gyro: &[GyroSample<T>],
    wheel: &[WheelSample<T>],
) -> Result<Vec<OdometerStep<T>>, SensorError> {
    check_increasing(gyro.iter().map(|g| g.timestamp))?;
    check_increasing(wheel.iter().map(|w| w.timestamp))?;
    let mut steps = Vec::with_capacity(wheel.len().saturating_sub(1));
    if gyro.is_empty() {
        return Ok(steps);
    }
    let mut g = 0usize;
    const TIME_SLACK: f64 = 1e-9;
    for pair in wheel.windows(2) {
        let (start, end) = (pair[0].timestamp, pair[1].timestamp);
        while g + 1 < gyro.len() && gyro[g + 1].timestamp <= start + TIME_SLACK {
            g += 1;
        }
        steps.push(OdometerStep {
            timestamp: end,
            omega: gyro[g].omega,
            dist_left: pair[1].dist_left,
            dist_right: pair[1].dist_right,
            dt: T::lit(end - start),
        });
    }
    Ok(steps)
}

fn check_increasing(ts: impl Iterator<Item = f64>) -> Result<(), SensorError> {
    let mut prev = f64::NEG_INFINITY;
    for (index, t) in ts.enumerate() {
        if t <= prev {
            return Err(SensorError::NonMonotonicTimestamps { index });
        }
        prev = t;
    }
    Ok(())
}
