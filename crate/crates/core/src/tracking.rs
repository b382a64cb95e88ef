//! Front-end pose estimation: per-frame solves for every tracking mode,
//! slippage detection and the keyframe decision.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::factors::{reprojection_residual, Factor, FrameState, PriorState};
use crate::mapping::{Estimator, MapPoint};
use crate::optimizer::{FrameVar, LandmarkVar, OptimizerError, Problem, SolveReport};
use crate::preintegration::PreintegratedOdometer;

/// Variable id of the previous (or reference) frame in a tracking problem.
pub const PREV: usize = 0;
/// Variable id of the frame being tracked.
pub const CUR: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrackingMode {
    MapUpdated,
    NoMapUpdate,
    SlippageRecovery,
    Reloc,
    NewMapLocal,
    OdomOnly,
}

impl TrackingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackingMode::MapUpdated => "MAP_UPDATED",
            TrackingMode::NoMapUpdate => "NO_MAP_UPDATE",
            TrackingMode::SlippageRecovery => "SLIPPAGE_RECOVERY",
            TrackingMode::Reloc => "RELOC",
            TrackingMode::NewMapLocal => "NEW_MAP_LOCAL",
            TrackingMode::OdomOnly => "ODOM_ONLY",
        }
    }

    /// Whether the frame was localized against the map.
    pub fn is_visual(&self) -> bool {
        !matches!(self, TrackingMode::OdomOnly)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub frame: usize,
    pub timestamp: f64,
    pub state: FrameState<f64>,
    pub mode: TrackingMode,
    pub inliers: usize,
    pub slippage: bool,
    pub keyframe: bool,
}

/// Association of an observed pixel with a map point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub point: usize,
    pub pixel: Vector2<f64>,
}

/// True when fewer than half of the matches survive optimization.
pub fn detect_slippage(pre_inliers: usize, post_inliers: usize) -> bool {
    post_inliers < pre_inliers.div_ceil(2)
}

/// Pose problem over the tracked frame and, optionally, the previous one.
#[derive(Clone, Debug)]
pub struct FrameProblem {
    /// Keyframe or previous frame. Fixed in single-frame modes.
    pub prev: FrameVar<f64>,
    /// Prior on `prev`, used when it is free.
    pub prior: Option<Arc<PriorState<f64>>>,
    pub prev_matches: Vec<Match>,
    pub guess: FrameState<f64>,
    pub matches: Vec<Match>,
    pub odometer: Option<Arc<PreintegratedOdometer<f64>>>,
    /// Time between `prev` and the tracked frame.
    pub dt: f64,
}

#[derive(Clone, Debug)]
pub struct PoseSolution {
    pub state: FrameState<f64>,
    pub prev_state: FrameState<f64>,
    pub prior: Arc<PriorState<f64>>,
    /// Matches of the tracked frame that pass the χ² test at the solution.
    pub inliers: Vec<Match>,
    pub report: SolveReport,
}

/// Weighted squared reprojection error, infinite when the point is behind the camera.
pub fn match_chi2(est: &Estimator, state: &FrameState<f64>, point: &Vector3<f64>, pixel: &Vector2<f64>) -> f64 {
    match reprojection_residual(state, point, pixel, &est.calib.ext, &est.calib.cam) {
        Ok((r, _, _)) => (r.transpose() * est.pixel_information() * r)[(0, 0)],
        Err(_) => f64::INFINITY,
    }
}

fn in_front(est: &Estimator, state: &FrameState<f64>, point: &Vector3<f64>) -> bool {
    let c = est.calib.ext.camera_pose(&state.pose).transform(point);
    c.z > 0.05
}

impl FrameProblem {
    fn build(
        &self,
        est: &Estimator,
        points: &BTreeMap<usize, MapPoint>,
        prev_state: &FrameState<f64>,
        cur_state: &FrameState<f64>,
        prev_matches: &[Match],
        matches: &[Match],
    ) -> Result<Problem<f64>, OptimizerError> {
        let mut p = est.problem();
        let prev_free = !self.prev.fix_pose || !self.prev.fix_bias;
        p.frames.insert(PREV, FrameVar { state: *prev_state, ..self.prev });
        p.frames.insert(CUR, FrameVar::free(*cur_state));
        for (frame, list) in [(PREV, prev_matches), (CUR, matches)] {
            for m in list {
                let Some(mp) = points.get(&m.point) else { continue };
                p.landmarks.insert(m.point, LandmarkVar { position: mp.position, fixed: true });
                p.factors.push(est.reprojection(frame, m.point, m.pixel));
            }
        }
        if let Some(o) = &self.odometer {
            p.factors.push(Factor::Odometer { i: PREV, j: CUR, preint: o.clone() });
        }
        p.factors.push(est.bias_walk(PREV, CUR, self.dt)?);
        est.add_plane(&mut p, CUR);
        if prev_free {
            est.add_plane(&mut p, PREV);
            if let Some(prior) = &self.prior {
                p.factors.push(Factor::Prior { frame: PREV, prior: prior.clone() });
            }
        }
        Ok(p)
    }

    fn usable(&self, est: &Estimator, points: &BTreeMap<usize, MapPoint>, state: &FrameState<f64>, list: &[Match]) -> Vec<Match> {
        list.iter()
            .filter(|m| points.get(&m.point).is_some_and(|p| in_front(est, state, &p.position)))
            .copied()
            .collect()
    }

    /// Optimizes, drops χ² outliers and re-optimizes `outlier_rounds − 1`
    /// times, then classifies every match of the tracked frame.
    pub fn solve(&self, est: &Estimator, points: &BTreeMap<usize, MapPoint>) -> Result<PoseSolution, OptimizerError> {
        let cfg = est.config;
        let thr = cfg.outlier_chi2;
        let mut prev_state = self.prev.state;
        let mut cur = self.guess;
        let mut prev_active = self.usable(est, points, &prev_state, &self.prev_matches);
        let mut active = self.usable(est, points, &cur, &self.matches);
        let mut last = None;
        for round in 0..cfg.outlier_rounds {
            let mut p = self.build(est, points, &prev_state, &cur, &prev_active, &active)?;
            let report = p.solve(&cfg.solve_options())?;
            prev_state = p.frames[&PREV].state;
            cur = p.frames[&CUR].state;
            last = Some((p, report));
            if round + 1 < cfg.outlier_rounds {
                let keep = |s: &FrameState<f64>, list: &[Match]| -> Vec<Match> {
                    list.iter()
                        .filter(|m| match_chi2(est, s, &points[&m.point].position, &m.pixel) <= thr)
                        .copied()
                        .collect()
                };
                prev_active = keep(&prev_state, &prev_active);
                active = keep(&cur, &active);
            }
        }
        let (p, report) = last.expect("outlier_rounds is positive");
        let inliers: Vec<Match> = self
            .matches
            .iter()
            .filter(|m| points.get(&m.point).is_some_and(|mp| match_chi2(est, &cur, &mp.position, &m.pixel) <= thr))
            .copied()
            .collect();
        let info = p.marginal_hessian(CUR)?;
        let prior = Arc::new(PriorState::from_tangent_information(cur, &info));
        Ok(PoseSolution { state: cur, prev_state, prior, inliers, report })
    }

    /// Prior on the tracked frame at `guess` without optimizing.
    pub fn marginal_at_guess(&self, est: &Estimator, points: &BTreeMap<usize, MapPoint>) -> Result<Arc<PriorState<f64>>, OptimizerError> {
        let p = self.build(est, points, &self.prev.state, &self.guess, &[], &[])?;
        let info = p.marginal_hessian(CUR)?;
        Ok(Arc::new(PriorState::from_tangent_information(self.guess, &info)))
    }
}

/// Pose predicted by applying bias-corrected preintegration to `from`.
pub fn predict(from: &FrameState<f64>, preint: &PreintegratedOdometer<f64>) -> FrameState<f64> {
    let (d_r, d_p) = preint.correct_for_bias(&from.bias);
    FrameState::new(from.pose.compose_relative(&d_r, &d_p), from.bias)
}

/// Inputs of the keyframe decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeCue {
    pub visual_lost: bool,
    pub inliers: usize,
    /// Points matched in the last keyframe.
    pub last_kf_points: usize,
    /// Travel and rotation since the last keyframe.
    pub distance: f64,
    pub angle: f64,
    pub ba_finished: bool,
    pub forced: bool,
}

pub fn keyframe_decision(cue: &KeyframeCue, cfg: &crate::config::PipelineConfig) -> bool {
    if cue.forced || cue.ba_finished {
        return true;
    }
    if cue.visual_lost {
        cue.distance > cfg.lost_keyframe_distance || cue.angle > cfg.lost_keyframe_angle_deg.to_radians()
    } else {
        (cue.inliers as f64) < cfg.keyframe_track_ratio * cue.last_kf_points as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::factors::Calibration;
    use crate::manifold::Pose;
    use crate::sensors::{project, CameraModel, CameraMount, Extrinsics, NoiseParams, OdometerStep};

    #[test]
    fn slippage_threshold() {
        assert!(detect_slippage(100, 49));
        assert!(!detect_slippage(100, 50));
        assert!(!detect_slippage(10, 10));
        assert!(detect_slippage(11, 5));
        assert!(!detect_slippage(11, 6));
    }

    #[test]
    fn keyframe_rules() {
        let cfg = PipelineConfig::default();
        let base = KeyframeCue {
            visual_lost: false,
            inliers: 90,
            last_kf_points: 100,
            distance: 0.0,
            angle: 0.0,
            ba_finished: false,
            forced: false,
        };
        assert!(!keyframe_decision(&base, &cfg));
        assert!(keyframe_decision(&KeyframeCue { inliers: 49, ..base }, &cfg));
        assert!(keyframe_decision(&KeyframeCue { ba_finished: true, ..base }, &cfg));
        let lost = KeyframeCue { visual_lost: true, inliers: 0, ..base };
        assert!(!keyframe_decision(&lost, &cfg));
        assert!(keyframe_decision(&KeyframeCue { distance: 0.5, ..lost }, &cfg));
        assert!(keyframe_decision(&KeyframeCue { angle: 0.2, ..lost }, &cfg));
    }

    struct World {
        calib: Calibration<f64>,
        noise: NoiseParams<f64>,
        cfg: PipelineConfig,
        points: BTreeMap<usize, MapPoint>,
    }

    fn world() -> World {
        let calib = Calibration {
            ext: Extrinsics::mounted(CameraMount::Forward, Vector3::new(0.1, 0.0, 0.3)),
            cam: CameraModel { fx: 400.0, fy: 400.0, cx: 320.0, cy: 240.0, width: 640.0, height: 480.0 },
        };
        let mut points = BTreeMap::new();
        for i in 0..40 {
            let x = 4.0 + (i % 8) as f64;
            let y = -2.0 + 0.5 * (i / 8) as f64;
            let z = 0.2 + 0.15 * (i % 5) as f64;
            points.insert(i, MapPoint {
                position: Vector3::new(x, y, z),
                observations: BTreeMap::new(),
                source: i,
                epoch: 0,
            });
        }
        World {
            calib,
            noise: NoiseParams::from_sigmas(1e-3, 1e-3, 1e-5, 0.01, 0.01, 0.5),
            cfg: PipelineConfig::default(),
            points,
        }
    }

    fn observe(w: &World, pose: &Pose<f64>) -> Vec<Match> {
        w.points
            .iter()
            .filter_map(|(id, p)| {
                project(&p.position, pose, &w.calib.ext, &w.calib.cam)
                    .ok()
                    .map(|px| Match { point: *id, pixel: px })
            })
            .collect()
    }

    fn straight_preint(w: &World, dist: f64) -> Arc<PreintegratedOdometer<f64>> {
        let steps: Vec<OdometerStep<f64>> = (0..5)
            .map(|k| OdometerStep {
                timestamp: 0.02 * (k + 1) as f64,
                omega: Vector3::zeros(),
                dist_left: dist / 5.0,
                dist_right: dist / 5.0,
                dt: 0.02,
            })
            .collect();
        Arc::new(PreintegratedOdometer::from_steps(&steps, Vector3::zeros(), &w.calib.ext, &w.noise).unwrap())
    }

    #[test]
    fn map_updated_recovers_truth() {
        let w = world();
        let est = Estimator { calib: w.calib, noise: &w.noise, config: &w.cfg };
        let kf = FrameState::new(Pose::identity(), Vector3::zeros());
        let truth = Pose::from_planar(0.1, 0.0, 0.0);
        let preint = straight_preint(&w, 0.1);
        let guess = predict(&kf, &preint);
        let fp = FrameProblem {
            prev: FrameVar::fixed(kf),
            prior: None,
            prev_matches: vec![],
            guess: FrameState::new(guess.pose.retract(&Vector3::new(0.0, 0.0, 0.02), &Vector3::new(0.03, 0.01, 0.0)), guess.bias),
            matches: observe(&w, &truth),
            odometer: Some(preint),
            dt: 0.1,
        };
        let sol = fp.solve(&est, &w.points).unwrap();
        assert!((sol.state.pose.center() - truth.center()).norm() < 1e-6);
        assert_eq!(sol.inliers.len(), fp.matches.len());
    }

    #[test]
    fn slip_flags_outliers() {
        // Wheels report 0.3 m while the robot stays put.
        let w = world();
        let est = Estimator { calib: w.calib, noise: &w.noise, config: &w.cfg };
        let kf = FrameState::new(Pose::identity(), Vector3::zeros());
        let preint = straight_preint(&w, 0.3);
        let matches = observe(&w, &Pose::identity());
        let fp = FrameProblem {
            prev: FrameVar::fixed(kf),
            prior: None,
            prev_matches: vec![],
            guess: predict(&kf, &preint),
            matches: matches.clone(),
            odometer: Some(preint),
            dt: 0.1,
        };
        let sol = fp.solve(&est, &w.points).unwrap();
        assert!(detect_slippage(matches.len(), sol.inliers.len()), "{} of {}", sol.inliers.len(), matches.len());
        let recovery = FrameProblem { odometer: None, guess: kf, ..fp };
        let sol = recovery.solve(&est, &w.points).unwrap();
        assert!(sol.state.pose.center().norm() < 1e-6);
    }

    #[test]
    fn joint_solve_with_prior() {
        let w = world();
        let est = Estimator { calib: w.calib, noise: &w.noise, config: &w.cfg };
        let prev = FrameState::new(Pose::identity(), Vector3::zeros());
        let mut info = crate::factors::Matrix9::identity() * 1e4;
        info[(8, 8)] = 1e6;
        let prior = Arc::new(PriorState::from_tangent_information(prev, &info));
        let truth = Pose::from_planar(0.1, 0.0, 0.0);
        let preint = straight_preint(&w, 0.1);
        let fp = FrameProblem {
            prev: FrameVar::free(prev),
            prior: Some(prior),
            prev_matches: observe(&w, &prev.pose),
            guess: predict(&prev, &preint),
            matches: observe(&w, &truth),
            odometer: Some(preint),
            dt: 0.1,
        };
        let sol = fp.solve(&est, &w.points).unwrap();
        assert!((sol.state.pose.center() - truth.center()).norm() < 1e-6);
        assert!(sol.prev_state.pose.center().norm() < 1e-6);
        // The marginal must be positive definite.
        assert!(sol.prior.information.cholesky().is_some());
    }

    #[test]
    fn joint_solve_without_prior_is_singular() {
        let w = world();
        let mut cfg = PipelineConfig::default();
        cfg.mode = crate::config::Mode::NoPlaneFactor;
        let est = Estimator { calib: w.calib, noise: &w.noise, config: &cfg };
        let prev = FrameState::new(Pose::identity(), Vector3::zeros());
        let preint = straight_preint(&w, 0.1);
        let fp = FrameProblem {
            prev: FrameVar::free(prev),
            prior: None,
            prev_matches: vec![],
            guess: predict(&prev, &preint),
            matches: vec![],
            odometer: Some(preint),
            dt: 0.1,
        };
        assert!(matches!(fp.solve(&est, &w.points), Err(OptimizerError::SingularSystem { .. })));
    }
}
