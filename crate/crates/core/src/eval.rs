//! Trajectory alignment (Horn's closed form) and absolute trajectory error.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Quaternion};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("sequences differ in length ({est} vs {truth})")]
    LengthMismatch { est: usize, truth: usize },
    #[error("need at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
}

/// Similarity `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Alignment {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros(), scale: 1.0 }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) / self.scale, scale: 1.0 / self.scale }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedResult {
    pub alignment: Alignment,
    /// Position error of every pose after alignment (m).
    pub errors: Vec<f64>,
    pub rmse: f64,
    /// RMSE as a percentage of `distance`.
    pub percent_of_distance: f64,
    pub mean: f64,
    pub max: f64,
    pub distance: f64,
}

/// Closed-form least-squares alignment mapping `est` onto `truth`, using the
/// unit-quaternion method. With `with_scale` a similarity is estimated.
pub fn align_horn(est: &[Vector3<f64>], truth: &[Vector3<f64>], with_scale: bool) -> Result<Alignment, EvalError> {
    if est.len() != truth.len() {
        return Err(EvalError::LengthMismatch { est: est.len(), truth: truth.len() });
    }
    let n = est.len();
    if n < 3 {
        return Err(EvalError::TooFewPoses(n));
    }
    let nf = n as f64;
    let ce = est.iter().sum::<Vector3<f64>>() / nf;
    let ct = truth.iter().sum::<Vector3<f64>>() / nf;
    let mut m = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, t) in est.iter().zip(truth) {
        let (de, dt) = (e - ce, t - ct);
        m += de * dt.transpose();
        spread += de * de.transpose();
        var_e += de.norm_squared();
    }
    if var_e < 1e-24 {
        return Err(EvalError::DegenerateGeometry("all points coincide"));
    }
    if with_scale {
        let ev = spread.symmetric_eigenvalues();
        let mut v: Vec<f64> = ev.iter().copied().collect();
        v.sort_by(|a, b| b.total_cmp(a));
        if v[1] < 1e-12 * v[0] {
            return Err(EvalError::DegenerateGeometry("collinear points"));
        }
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = nmat.symmetric_eigen();
    let imax = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(imax);
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    let rotation = *rot.to_rotation_matrix().matrix();
    let scale = if with_scale {
        let num: f64 = est.iter().zip(truth).map(|(e, t)| (t - ct).dot(&(rotation * (e - ce)))).sum();
        num / var_e
    } else {
        1.0
    };
    let translation = ct - rotation * ce * scale;
    Ok(Alignment { rotation, translation, scale })
}

pub fn ate_rmse(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Length of the polyline through `points`.
pub fn path_length(points: &[Vector3<f64>]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Aligns `est` to `truth` and computes the error statistics. `distance`
/// is the reference length for the percentage.
pub fn evaluate(est: &[Vector3<f64>], truth: &[Vector3<f64>], with_scale: bool, distance: f64) -> Result<AlignedResult, EvalError> {
    let alignment = align_horn(est, truth, with_scale)?;
    let errors: Vec<f64> = est.iter().zip(truth).map(|(e, t)| (alignment.apply(e) - t).norm()).collect();
    let rmse = ate_rmse(&errors);
    Ok(AlignedResult {
        alignment,
        rmse,
        percent_of_distance: if distance > 0.0 { 100.0 * rmse / distance } else { f64::INFINITY },
        mean: errors.iter().sum::<f64>() / errors.len() as f64,
        max: errors.iter().copied().fold(0.0, f64::max),
        distance,
        errors,
    })
}

/// Pairs each estimate with the nearest truth timestamp within `max_dt`.
/// Returns index pairs and the number of unmatched estimates.
pub fn associate(est: &[f64], truth: &[f64], max_dt: f64) -> (Vec<(usize, usize)>, usize) {
    let mut pairs = Vec::new();
    let mut unmatched = 0;
    for (i, t) in est.iter().enumerate() {
        let k = truth.partition_point(|v| v < t);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&j| j < truth.len())
            .min_by(|&a, &b| (truth[a] - t).abs().total_cmp(&(truth[b] - t).abs()));
        match best {
            Some(j) if (truth[j] - t).abs() <= max_dt => pairs.push((i, j)),
            _ => unmatched += 1,
        }
    }
    (pairs, unmatched)
}

/// Associates timestamped positions with ground truth (nearest neighbour
/// within half of `period`), aligns rigidly and computes the errors.
/// Returns the result and the number of dropped estimates.
pub fn evaluate_timed(
    est: &[(f64, Vector3<f64>)],
    truth: &[(f64, Vector3<f64>)],
    period: f64,
    distance: f64,
) -> Result<(AlignedResult, usize), EvalError> {
    let te: Vec<f64> = est.iter().map(|e| e.0).collect();
    let tt: Vec<f64> = truth.iter().map(|t| t.0).collect();
    let (pairs, dropped) = associate(&te, &tt, 0.5 * period);
    let e: Vec<Vector3<f64>> = pairs.iter().map(|(i, _)| est[*i].1).collect();
    let t: Vec<Vector3<f64>> = pairs.iter().map(|(_, j)| truth[*j].1).collect();
    Ok((evaluate(&e, &t, false, distance)?, dropped))
}
