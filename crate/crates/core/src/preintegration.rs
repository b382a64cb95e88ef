//! Odometer preintegration on SO(3).
//!
//! Wheel and gyro measurements between two frames are folded into a single
//! relative-motion measurement `(ΔR̃_ij, Δp̃_ij)` expressed in frame `i`,
//! together with its 6×6 covariance (ordered `δφ, δp`) and the Jacobians
//! needed to correct for a change of gyro bias without re-integrating.

use nalgebra::{Matrix3, Matrix6, Vector3};
use thiserror::Error;

use crate::manifold::{exp_so3, hat, log_so3, right_jacobian, Rotation};
use crate::rng::{psd_sqrt3, NoiseRng, Stream};
use crate::sensors::{Extrinsics, NoiseParams, OdometerStep};
use crate::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreintegrationError {
    #[error("integration step has non-positive dt ({0})")]
    NonPositiveDt(f64),
    #[error("monte-carlo covariance needs at least 1000 trials, got {0}")]
    TooFewTrials(usize),
}

/// Accumulated odometer motion between two frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreintegratedOdometer<T: Real> {
    pub delta_r: Rotation<T>,
    pub delta_p: Vector3<T>,
    /// Covariance of `(δφ, δp)`.
    pub cov: Matrix6<T>,
    pub d_r_d_bg: Matrix3<T>,
    pub d_p_d_bg: Matrix3<T>,
    /// Bias the measurements were integrated with.
    pub bias_ref: Vector3<T>,
    pub dt_total: T,
    pub count: usize,
}

impl<T: Real> PreintegratedOdometer<T> {
    /// Empty preintegration, integrated against `bias_ref`.
    pub fn new(bias_ref: Vector3<T>) -> Self {
        Self {
            delta_r: Rotation::identity(),
            delta_p: Vector3::zeros(),
            cov: Matrix6::zeros(),
            d_r_d_bg: Matrix3::zeros(),
            d_p_d_bg: Matrix3::zeros(),
            bias_ref,
            dt_total: T::zero(),
            count: 0,
        }
    }

    /// Integrates a whole step sequence.
    pub fn from_steps(
        steps: &[OdometerStep<T>],
        bias_ref: Vector3<T>,
        ext: &Extrinsics<T>,
        noise: &NoiseParams<T>,
    ) -> Result<Self, PreintegrationError> {
        steps
            .iter()
            .try_fold(Self::new(bias_ref), |acc, s| acc.integrate_step(s, ext, noise))
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Appends one wheel interval.
    pub fn integrate_step(
        &self,
        step: &OdometerStep<T>,
        ext: &Extrinsics<T>,
        noise: &NoiseParams<T>,
    ) -> Result<Self, PreintegrationError> {
        self.integrate_displacement(
            &step.omega,
            &step.displacement(),
            step.dt,
            &ext.r_o_b,
            &noise.gyro,
            &noise.displacement_cov(),
        )
    }

    /// Core update with an explicit body displacement `ψ̃` and noise blocks.
    pub fn integrate_displacement(
        &self,
        omega: &Vector3<T>,
        psi: &Vector3<T>,
        dt: T,
        r_o_b: &Rotation<T>,
        gyro_cov: &Matrix3<T>,
        psi_cov: &Matrix3<T>,
    ) -> Result<Self, PreintegrationError> {
        if !(dt > T::zero()) {
            return Err(PreintegrationError::NonPositiveDt(dt.as_f64()));
        }
        let r_ob = *r_o_b.matrix();
        let phi = r_ob * (omega - self.bias_ref) * dt;
        let step_r = exp_so3(&phi);
        let jr = right_jacobian(&phi);
        let d_r = *self.delta_r.matrix();
        let psi_hat = hat(psi);

        // A = [[ΔR_kᵀ, 0], [−ΔR_ik·ψ^, I]],  B = [[J_r·R_B^O·Δt, 0], [0, ΔR_ik]]
        let mut a = Matrix6::<T>::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_r.matrix().transpose());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(d_r * psi_hat)));
        let mut b = Matrix6::<T>::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * r_ob * dt));
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&d_r);
        let mut noise = Matrix6::<T>::zeros();
        noise.fixed_view_mut::<3, 3>(0, 0).copy_from(gyro_cov);
        noise.fixed_view_mut::<3, 3>(3, 3).copy_from(psi_cov);
        let cov = a * self.cov * a.transpose() + b * noise * b.transpose();
        let cov = (cov + cov.transpose()) * T::lit(0.5);

        // Position terms use ΔR_{i,k−1}, so they are updated before the rotation.
        let d_p_d_bg = self.d_p_d_bg - d_r * psi_hat * self.d_r_d_bg;
        let d_r_d_bg = step_r.matrix().transpose() * self.d_r_d_bg - jr * r_ob * dt;
        let delta_p = self.delta_p + d_r * psi;
        let delta_r = (self.delta_r * step_r).renormalized();

        Ok(Self {
            delta_r,
            delta_p,
            cov,
            d_r_d_bg,
            d_p_d_bg,
            bias_ref: self.bias_ref,
            dt_total: self.dt_total + dt,
            count: self.count + 1,
        })
    }

    /// First-order bias correction of `(ΔR̃, Δp̃)` for a new bias estimate.
    pub fn correct_for_bias(&self, bias: &Vector3<T>) -> (Rotation<T>, Vector3<T>) {
        let db = bias - self.bias_ref;
        (
            self.delta_r * exp_so3(&(self.d_r_d_bg * db)),
            self.delta_p + self.d_p_d_bg * db,
        )
    }

    /// Concatenates `self` (i→k) with `next` (k→j). Both must share `bias_ref`.
    pub fn compose(&self, next: &Self) -> Self {
        let r_ik = *self.delta_r.matrix();
        let delta_r = (self.delta_r * next.delta_r).renormalized();
        let delta_p = self.delta_p + r_ik * next.delta_p;
        // Noise of the joined interval: δφ_ij = ΔR_kjᵀ δφ_ik + δφ_kj,
        // δp_ij = δp_ik − ΔR_ik·(Δp_kj)^·δφ_ik + ΔR_ik·δp_kj.
        let mut a = Matrix6::<T>::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&next.delta_r.matrix().transpose());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(r_ik * hat(&next.delta_p))));
        let mut b = Matrix6::<T>::identity();
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&r_ik);
        let cov = a * self.cov * a.transpose() + b * next.cov * b.transpose();
        Self {
            delta_r,
            delta_p,
            cov: (cov + cov.transpose()) * T::lit(0.5),
            d_r_d_bg: next.delta_r.matrix().transpose() * self.d_r_d_bg + next.d_r_d_bg,
            d_p_d_bg: self.d_p_d_bg - r_ik * hat(&next.delta_p) * self.d_r_d_bg
                + r_ik * next.d_p_d_bg,
            bias_ref: self.bias_ref,
            dt_total: self.dt_total + next.dt_total,
            count: self.count + next.count,
        }
    }
}

/// Sample covariance of preintegration errors under simulated sensor noise.
///
/// Each trial adds `N(0, Σ_gd)` to every gyro rate and `N(0, Σ_ψd)` to every
/// body displacement, re-integrates, and records
/// `(Log(ΔR_trueᵀ·ΔR_noisy), Δp_noisy − Δp_true)`. Independent of the
/// covariance recursion it validates.
pub fn monte_carlo_covariance(
    truth_inputs: &[OdometerStep<f64>],
    ext: &Extrinsics<f64>,
    noise: &NoiseParams<f64>,
    trials: usize,
    seed: u64,
) -> Result<Matrix6<f64>, PreintegrationError> {
    if trials < 1000 {
        return Err(PreintegrationError::TooFewTrials(trials));
    }
    let clean = replay(truth_inputs, ext, |_| (Vector3::zeros(), Vector3::zeros()))?;
    let gyro_sqrt = psd_sqrt3(&noise.gyro);
    let psi_sqrt = psd_sqrt3(&noise.displacement_cov());
    let mut rng = NoiseRng::new(seed, Stream::MonteCarlo);
    let mut sum = nalgebra::Vector6::<f64>::zeros();
    let mut sum_sq = Matrix6::<f64>::zeros();
    for _ in 0..trials {
        let (r, p) = replay(truth_inputs, ext, |_| {
            (rng.correlated3(&gyro_sqrt), rng.correlated3(&psi_sqrt))
        })?;
        let d_phi = log_so3(&(clean.0.transpose() * r));
        let d_p = p - clean.1;
        let e = nalgebra::Vector6::new(d_phi.x, d_phi.y, d_phi.z, d_p.x, d_p.y, d_p.z);
        sum += e;
        sum_sq += e * e.transpose();
    }
    let n = trials as f64;
    let mean = sum / n;
    Ok((sum_sq - mean * mean.transpose() * n) / (n - 1.0))
}

/// Plain re-integration of rotation and position with per-step perturbations.
fn replay(
    steps: &[OdometerStep<f64>],
    ext: &Extrinsics<f64>,
    mut perturb: impl FnMut(usize) -> (Vector3<f64>, Vector3<f64>),
) -> Result<(Rotation<f64>, Vector3<f64>), PreintegrationError> {
    let mut r = Rotation::identity();
    let mut p = Vector3::zeros();
    for (k, s) in steps.iter().enumerate() {
        if !(s.dt > 0.0) {
            return Err(PreintegrationError::NonPositiveDt(s.dt));
        }
        let (eta_g, eta_psi) = perturb(k);
        p += r * (s.displacement() + eta_psi);
        r = r * exp_so3(&(ext.r_o_b * (s.omega + eta_g) * s.dt));
    }
    Ok((r, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(wz: f64, d: f64, dt: f64) -> OdometerStep<f64> {
        OdometerStep {
            timestamp: 0.0,
            omega: Vector3::new(0.0, 0.0, wz),
            dist_left: d,
            dist_right: d,
            dt,
        }
    }

    fn nominal() -> NoiseParams<f64> {
        NoiseParams::from_sigmas(1e-3, 1e-3, 1e-5, 0.01, 0.01, 0.5)
    }

    #[test]
    fn zero_motion_step_covariance() {
        let ext = Extrinsics::default();
        let n = nominal();
        let p = PreintegratedOdometer::new(Vector3::zeros())
            .integrate_step(&step(0.0, 0.0, 0.1), &ext, &n)
            .unwrap();
        assert_eq!(*p.delta_r.matrix(), Matrix3::identity());
        assert_eq!(p.delta_p, Vector3::zeros());
        let mut expected = Matrix6::zeros();
        expected.fixed_view_mut::<3, 3>(0, 0).copy_from(&(n.gyro * 0.01));
        expected.fixed_view_mut::<3, 3>(3, 3).copy_from(&n.displacement_cov());
        assert!((p.cov - expected).amax() < 1e-20);
    }

    #[test]
    fn pure_rotation_integrates_to_constant_rate_angle() {
        let ext = Extrinsics::default();
        let steps = vec![step(0.1, 0.0, 0.1); 100];
        let p = PreintegratedOdometer::from_steps(&steps, Vector3::zeros(), &ext, &nominal()).unwrap();
        let expected = exp_so3(&Vector3::new(0.0, 0.0, 1.0));
        assert!((p.delta_r.matrix() - expected.matrix()).amax() < 1e-12);
        assert!(p.delta_p.norm() < 1e-15);
        assert_eq!(p.count, 100);
    }

    #[test]
    fn straight_drive_accumulates_distance() {
        let ext = Extrinsics::default();
        let steps = vec![step(0.0, 0.01, 0.1); 100];
        let p = PreintegratedOdometer::from_steps(&steps, Vector3::zeros(), &ext, &nominal()).unwrap();
        assert!((p.delta_p - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(*p.delta_r.matrix(), Matrix3::identity());
    }

    #[test]
    fn non_positive_dt_is_rejected() {
        let p = PreintegratedOdometer::new(Vector3::zeros());
        let err = p.integrate_step(&step(0.0, 0.0, 0.0), &Extrinsics::default(), &nominal());
        assert_eq!(err, Err(PreintegrationError::NonPositiveDt(0.0)));
    }

    #[test]
    fn bias_correction_at_reference_is_identity() {
        let steps: Vec<_> = (0..20).map(|k| step(0.05 * k as f64, 0.02, 0.05)).collect();
        let b = Vector3::new(0.001, -0.002, 0.003);
        let p = PreintegratedOdometer::from_steps(&steps, b, &Extrinsics::default(), &nominal()).unwrap();
        let (r, t) = p.correct_for_bias(&b);
        assert_eq!(r.matrix(), p.delta_r.matrix());
        assert_eq!(t, p.delta_p);
    }

    #[test]
    fn recurrence_matches_closed_sum_for_rotation_jacobian() {
        // ∂ΔR̄_ij/∂b = Σ_k −ΔR̃_{k+1,j}ᵀ·J_r,k·R_B^O·Δt
        let ext = Extrinsics {
            r_o_b: exp_so3(&Vector3::new(0.1, -0.2, 0.05)),
            ..Default::default()
        };
        let steps: Vec<_> = (0..15)
            .map(|k| OdometerStep {
                timestamp: 0.0,
                omega: Vector3::new(0.2, -0.1 * k as f64, 0.3),
                dist_left: 0.01,
                dist_right: 0.02,
                dt: 0.05,
            })
            .collect();
        let b = Vector3::new(0.01, 0.0, -0.02);
        let p = PreintegratedOdometer::from_steps(&steps, b, &ext, &nominal()).unwrap();
        let incs: Vec<Rotation<f64>> = steps
            .iter()
            .map(|s| exp_so3(&(ext.r_o_b * (s.omega - b) * s.dt)))
            .collect();
        let mut sum = Matrix3::zeros();
        for (k, s) in steps.iter().enumerate() {
            let r_k1_j = incs[k + 1..].iter().fold(Rotation::identity(), |acc, r| acc * *r);
            let jr = right_jacobian(&(ext.r_o_b * (s.omega - b) * s.dt));
            sum -= r_k1_j.matrix().transpose() * jr * ext.r_o_b.matrix() * s.dt;
        }
        assert!((sum - p.d_r_d_bg).amax() < 1e-13);
    }

    #[test]
    fn compose_matches_single_pass() {
        let ext = Extrinsics::default();
        let steps: Vec<_> = (0..30).map(|k| step(0.3 * (k as f64 * 0.2).sin(), 0.02, 0.05)).collect();
        let n = nominal();
        let b = Vector3::new(0.0, 0.0, 0.01);
        let whole = PreintegratedOdometer::from_steps(&steps, b, &ext, &n).unwrap();
        let first = PreintegratedOdometer::from_steps(&steps[..12], b, &ext, &n).unwrap();
        let second = PreintegratedOdometer::from_steps(&steps[12..], b, &ext, &n).unwrap();
        let joined = first.compose(&second);
        assert!((joined.delta_r.matrix() - whole.delta_r.matrix()).amax() < 1e-12);
        assert!((joined.delta_p - whole.delta_p).amax() < 1e-12);
        assert!((joined.cov - whole.cov).amax() < 1e-12 * whole.cov.amax().max(1.0));
        assert!((joined.d_r_d_bg - whole.d_r_d_bg).amax() < 1e-12);
        assert!((joined.d_p_d_bg - whole.d_p_d_bg).amax() < 1e-12);
    }

    #[test]
    fn monte_carlo_rejects_few_trials_and_zero_noise_is_zero() {
        let steps = vec![step(0.1, 0.01, 0.02); 10];
        let ext = Extrinsics::default();
        assert_eq!(
            monte_carlo_covariance(&steps, &ext, &nominal(), 10, 1),
            Err(PreintegrationError::TooFewTrials(10))
        );
        let c = monte_carlo_covariance(&steps, &ext, &NoiseParams::zero(), 1000, 1).unwrap();
        assert!(c.amax() < 1e-30);
    }

    #[test]
    fn single_precision_integration() {
        let ext = Extrinsics::<f32>::default();
        let n = nominal().cast::<f32>();
        let s = OdometerStep { timestamp: 0.0, omega: Vector3::new(0.0f32, 0.0, 0.1), dist_left: 0.01, dist_right: 0.01, dt: 0.1 };
        let p = PreintegratedOdometer::from_steps(&vec![s; 100], Vector3::zeros(), &ext, &n).unwrap();
        assert!((p.delta_r.angle() - 1.0).abs() < 1e-4);
    }
}
