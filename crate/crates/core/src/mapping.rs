//! Back-end: map initialization, keyframe insertion with triangulation,
//! windowed local bundle adjustment and covisibility bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector2, Vector3};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::factors::{
    bias_walk_information, Calibration, Factor, FactorError, FrameState, Matrix9, PriorState,
};
use crate::manifold::Pose;
use crate::optimizer::{FrameVar, LandmarkVar, OptimizerError, Problem, SolveReport};
use crate::preintegration::PreintegratedOdometer;
use crate::sensors::{CameraModel, Extrinsics, FeatureObservation, NoiseParams};

/// Frame id of the fixed identity state that anchors plane factors.
pub const PLANE_ANCHOR: usize = usize::MAX;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum NotReady {
    #[error("not enough matches with the reference frame")]
    InsufficientMatches,
    #[error("not enough parallax")]
    InsufficientParallax,
    #[error("too few triangulated points")]
    TooFewPoints,
}

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("map not ready: {0}")]
    NotReady(NotReady),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Factor(#[from] FactorError),
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum Degenerate {
    #[error("ray parallax below threshold")]
    LowParallax,
    #[error("point behind a camera")]
    BehindCamera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: usize,
    pub timestamp: f64,
    pub state: FrameState<f64>,
    /// Every observation of the frame, keyed by source landmark id.
    pub observations: BTreeMap<usize, Vector2<f64>>,
    /// Source landmark id → associated map point.
    pub matched: BTreeMap<usize, usize>,
    pub slippage: bool,
    pub relocalized: bool,
    pub prev: Option<usize>,
    /// Preintegration from `prev`; absent when no odometer factor may be built.
    pub odometer: Option<Arc<PreintegratedOdometer<f64>>>,
    /// Elapsed time since `prev`, for the bias-walk factor.
    pub dt_prev: f64,
    pub epoch: u32,
}

impl Keyframe {
    pub fn has_odometer_factor(&self) -> bool {
        self.odometer.is_some() && !self.slippage && !self.relocalized
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub position: Vector3<f64>,
    /// Observing keyframe → pixel.
    pub observations: BTreeMap<usize, Vector2<f64>>,
    /// Simulator landmark this point was triangulated from.
    pub source: usize,
    pub epoch: u32,
}

/// Result of a local bundle adjustment.
#[derive(Clone, Debug)]
pub struct BaSummary {
    pub report: SolveReport,
    pub window: Vec<usize>,
    pub fixed: Vec<usize>,
    pub odometer_factors: Vec<(usize, usize)>,
    pub removed_observations: usize,
    pub removed_points: usize,
}

/// Everything needed to build factors.
#[derive(Clone, Copy, Debug)]
pub struct Estimator<'a> {
    pub calib: Calibration<f64>,
    pub noise: &'a NoiseParams<f64>,
    pub config: &'a PipelineConfig,
}

impl Estimator<'_> {
    pub fn pixel_information(&self) -> Matrix2<f64> {
        self.noise.pixel.try_inverse().unwrap_or_else(Matrix2::identity)
    }

    pub fn plane_information(&self) -> Matrix3<f64> {
        self.noise.plane.try_inverse().unwrap_or_else(Matrix3::identity)
    }

    pub fn reprojection(&self, frame: usize, landmark: usize, pixel: Vector2<f64>) -> Factor<f64> {
        Factor::Reprojection {
            frame,
            landmark,
            pixel,
            information: self.pixel_information(),
            huber: Some(self.config.huber_delta),
        }
    }

    pub fn plane(&self, frame: usize) -> Factor<f64> {
        Factor::Plane { frame, anchor: PLANE_ANCHOR, information: self.plane_information() }
    }

    pub fn bias_walk(&self, i: usize, j: usize, dt: f64) -> Result<Factor<f64>, FactorError> {
        Ok(Factor::BiasWalk { i, j, information: bias_walk_information(&self.noise.bias_walk, dt.max(1e-3))? })
    }

    /// Empty problem with the plane anchor in place when planes are enabled.
    pub fn problem(&self) -> Problem<f64> {
        let mut p = Problem::new(self.calib);
        if self.config.use_plane() {
            p.frames.insert(PLANE_ANCHOR, FrameVar::fixed(FrameState::identity()));
        }
        p
    }

    pub fn add_plane(&self, p: &mut Problem<f64>, frame: usize) {
        if self.config.use_plane() {
            p.factors.push(self.plane(frame));
        }
    }
}

/// Linear two-view triangulation with positive-depth and parallax checks.
pub fn triangulate(
    px_a: &Vector2<f64>,
    px_b: &Vector2<f64>,
    pose_a: &Pose<f64>,
    pose_b: &Pose<f64>,
    ext: &Extrinsics<f64>,
    cam: &CameraModel<f64>,
    min_parallax_deg: f64,
) -> Result<Vector3<f64>, Degenerate> {
    let ca = ext.camera_pose(pose_a);
    let cb = ext.camera_pose(pose_b);
    let ba = cam.bearing(px_a);
    let bb = cam.bearing(px_b);
    let ray_a = ca.rotation.transpose() * ba.normalize();
    let ray_b = cb.rotation.transpose() * bb.normalize();
    let cos = ray_a.dot(&ray_b).clamp(-1.0, 1.0);
    if cos.acos() < min_parallax_deg.to_radians() {
        return Err(Degenerate::LowParallax);
    }
    let mut a = Matrix4::zeros();
    for (row, (c, b)) in [(&ca, &ba), (&cb, &bb)].into_iter().enumerate() {
        let r = c.rotation.matrix();
        let t = c.position;
        for (k, coord) in [b.x, b.y].into_iter().enumerate() {
            for j in 0..3 {
                a[(2 * row + k, j)] = coord * r[(2, j)] - r[(k, j)];
            }
            a[(2 * row + k, 3)] = coord * t.z - t[k];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Degenerate::LowParallax)?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
    let h = v_t.row(imin);
    if h[3].abs() < 1e-12 {
        return Err(Degenerate::LowParallax);
    }
    let x = Vector3::new(h[0], h[1], h[2]) / h[3];
    if ca.transform(&x).z <= 0.0 || cb.transform(&x).z <= 0.0 {
        return Err(Degenerate::BehindCamera);
    }
    Ok(x)
}

/// Input frame for initialization.
#[derive(Clone, Debug)]
pub struct InitFrame {
    pub id: usize,
    pub timestamp: f64,
    pub state: FrameState<f64>,
    pub observations: Vec<FeatureObservation<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct MapStore {
    pub keyframes: BTreeMap<usize, Keyframe>,
    pub points: BTreeMap<usize, MapPoint>,
    /// Keyframe pair (smaller id first) → number of shared points.
    pub covisibility: BTreeMap<(usize, usize), usize>,
    pub version: u64,
    next_point: usize,
}

/// A freshly initialized map and the prior on its newest keyframe.
#[derive(Clone, Debug)]
pub struct Initialization {
    pub map: MapStore,
    pub prior: Arc<PriorState<f64>>,
    pub report: SolveReport,
}

/// Two-view map initialization using the odometer's relative pose.
pub fn initialize_map(
    est: &Estimator,
    reference: &InitFrame,
    current: &InitFrame,
    odometer: Arc<PreintegratedOdometer<f64>>,
    epoch: u32,
) -> Result<Initialization, MappingError> {
    let cfg = est.config;
    let ref_obs: BTreeMap<usize, Vector2<f64>> =
        reference.observations.iter().map(|o| (o.landmark, o.pixel)).collect();
    let pairs: Vec<(usize, Vector2<f64>, Vector2<f64>)> = current
        .observations
        .iter()
        .filter_map(|o| ref_obs.get(&o.landmark).map(|a| (o.landmark, *a, o.pixel)))
        .collect();
    if pairs.len() < cfg.init_min_matches {
        return Err(MappingError::NotReady(NotReady::InsufficientMatches));
    }
    let (ext, cam) = (&est.calib.ext, &est.calib.cam);
    let (pa, pb) = (&reference.state.pose, &current.state.pose);
    let mut with_parallax = 0;
    let mut points = Vec::new();
    for (src, a, b) in &pairs {
        match triangulate(a, b, pa, pb, ext, cam, cfg.init_min_parallax_deg) {
            Ok(x) => {
                with_parallax += 1;
                points.push((*src, x, *a, *b));
            }
            Err(Degenerate::BehindCamera) => with_parallax += 1,
            Err(Degenerate::LowParallax) => {}
        }
    }
    if with_parallax < cfg.init_min_matches.min(30).max(1) {
        return Err(MappingError::NotReady(NotReady::InsufficientParallax));
    }
    if points.len() < cfg.init_min_points {
        return Err(MappingError::NotReady(NotReady::TooFewPoints));
    }

    let mut map = MapStore::default();
    let (r, c) = (reference.id, current.id);
    map.keyframes.insert(r, Keyframe {
        id: r,
        timestamp: reference.timestamp,
        state: reference.state,
        observations: ref_obs,
        matched: BTreeMap::new(),
        slippage: false,
        relocalized: false,
        prev: None,
        odometer: None,
        dt_prev: 0.0,
        epoch,
    });
    map.keyframes.insert(c, Keyframe {
        id: c,
        timestamp: current.timestamp,
        state: current.state,
        observations: current.observations.iter().map(|o| (o.landmark, o.pixel)).collect(),
        matched: BTreeMap::new(),
        slippage: false,
        relocalized: false,
        prev: Some(r),
        odometer: Some(odometer.clone()),
        dt_prev: current.timestamp - reference.timestamp,
        epoch,
    });
    for (src, x, a, b) in points {
        let id = map.add_point(src, x, epoch);
        map.observe(id, r, a);
        map.observe(id, c, b);
    }

    let mut prob = est.problem();
    prob.frames.insert(r, FrameVar { state: reference.state, fix_pose: true, fix_bias: false });
    prob.frames.insert(c, FrameVar::free(current.state));
    for (id, p) in &map.points {
        prob.landmarks.insert(*id, LandmarkVar { position: p.position, fixed: false });
        for (kf, px) in &p.observations {
            prob.factors.push(est.reprojection(*kf, *id, *px));
        }
    }
    prob.factors.push(Factor::Odometer { i: r, j: c, preint: odometer });
    prob.factors.push(est.bias_walk(r, c, current.timestamp - reference.timestamp)?);
    est.add_plane(&mut prob, r);
    est.add_plane(&mut prob, c);
    // Weak prior on the initial gyro bias.
    let s = est.config.noise.initial_bias_sigma;
    let mut info = Matrix9::zeros();
    for k in 6..9 {
        info[(k, k)] = 1.0 / (s * s);
    }
    prob.factors.push(Factor::Prior {
        frame: r,
        prior: Arc::new(PriorState { mean: reference.state, information: info }),
    });
    let report = prob.solve(&cfg.solve_options())?;
    map.apply_solution(&prob, &[r, c]);
    map.cull_outliers(&prob, cfg.outlier_chi2)?;
    if map.points.len() < cfg.init_min_points {
        return Err(MappingError::NotReady(NotReady::TooFewPoints));
    }
    let info = prob.marginal_hessian(c)?;
    let prior = Arc::new(PriorState::from_tangent_information(map.keyframes[&c].state, &info));
    map.update_covisibility(c, false, cfg.covisibility_min_shared);
    map.version = 1;
    Ok(Initialization { map, prior, report })
}

impl MapStore {
    fn add_point(&mut self, source: usize, position: Vector3<f64>, epoch: u32) -> usize {
        let id = self.next_point;
        self.next_point += 1;
        self.points.insert(id, MapPoint { position, observations: BTreeMap::new(), source, epoch });
        id
    }

    fn observe(&mut self, point: usize, kf: usize, pixel: Vector2<f64>) {
        if let Some(p) = self.points.get_mut(&point) {
            p.observations.insert(kf, pixel);
            if let Some(k) = self.keyframes.get_mut(&kf) {
                k.matched.insert(p.source, point);
            }
        }
    }

    fn unobserve(&mut self, point: usize, kf: usize) {
        if let Some(p) = self.points.get_mut(&point) {
            p.observations.remove(&kf);
            if let Some(k) = self.keyframes.get_mut(&kf) {
                if k.matched.get(&p.source) == Some(&point) {
                    k.matched.remove(&p.source);
                }
            }
        }
    }

    fn remove_point(&mut self, point: usize) {
        if let Some(p) = self.points.remove(&point) {
            for kf in p.observations.keys() {
                if let Some(k) = self.keyframes.get_mut(kf) {
                    if k.matched.get(&p.source) == Some(&point) {
                        k.matched.remove(&p.source);
                    }
                }
            }
        }
    }

    pub fn last_keyframe(&self) -> Option<&Keyframe> {
        self.keyframes.values().next_back()
    }

    /// The newest `n` keyframes, oldest first.
    pub fn window(&self, n: usize) -> Vec<usize> {
        let ids: Vec<usize> = self.keyframes.keys().copied().collect();
        ids[ids.len().saturating_sub(n)..].to_vec()
    }

    pub fn neighbors(&self, kf: usize) -> Vec<usize> {
        self.covisibility
            .keys()
            .filter_map(|&(a, b)| if a == kf { Some(b) } else if b == kf { Some(a) } else { None })
            .collect()
    }

    /// Points observed by the window keyframes and by the covisible
    /// neighbors of the newest keyframe.
    pub fn local_points(&self, window: usize) -> BTreeSet<usize> {
        let mut kfs: BTreeSet<usize> = self.window(window).into_iter().collect();
        if let Some(last) = self.last_keyframe() {
            kfs.extend(self.neighbors(last.id));
        }
        let mut out = BTreeSet::new();
        for kf in kfs {
            if let Some(k) = self.keyframes.get(&kf) {
                out.extend(k.matched.values().copied());
            }
        }
        out
    }

    /// Source landmark → point among `points`, preferring the newest epoch.
    pub fn by_source(&self, points: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
        let mut out: BTreeMap<usize, usize> = BTreeMap::new();
        for id in points {
            let Some(p) = self.points.get(&id) else { continue };
            match out.get(&p.source) {
                Some(&other) if self.points[&other].epoch > p.epoch => {}
                Some(&other) if self.points[&other].epoch == p.epoch && other > id => {}
                _ => {
                    out.insert(p.source, id);
                }
            }
        }
        out
    }

    /// Recomputes covisibility edges of `kf`; `temporal` links it to its predecessor.
    pub fn update_covisibility(&mut self, kf: usize, temporal: bool, min_shared: usize) {
        self.covisibility.retain(|&(a, b), _| a != kf && b != kf);
        let Some(k) = self.keyframes.get(&kf) else { return };
        let mut shared: BTreeMap<usize, usize> = BTreeMap::new();
        for pid in k.matched.values() {
            for other in self.points[pid].observations.keys() {
                if *other != kf {
                    *shared.entry(*other).or_default() += 1;
                }
            }
        }
        let prev = k.prev;
        for (other, n) in shared {
            if n >= min_shared {
                self.covisibility.insert((kf.min(other), kf.max(other)), n);
            }
        }
        if temporal {
            if let Some(p) = prev {
                self.covisibility.entry((p.min(kf), p.max(kf))).or_insert(0);
            }
        }
    }

    fn apply_solution(&mut self, prob: &Problem<f64>, frames: &[usize]) {
        for id in frames {
            if let (Some(k), Some(v)) = (self.keyframes.get_mut(id), prob.frames.get(id)) {
                k.state = v.state;
            }
        }
        for (id, l) in &prob.landmarks {
            if !l.fixed {
                if let Some(p) = self.points.get_mut(id) {
                    p.position = l.position;
                }
            }
        }
    }

    /// Drops reprojection outliers and points left with fewer than two observations.
    fn cull_outliers(&mut self, prob: &Problem<f64>, chi2: f64) -> Result<(usize, usize), MappingError> {
        let values = prob.factor_chi2()?;
        let mut removed = 0;
        for (f, c) in prob.factors.iter().zip(values) {
            if let Factor::Reprojection { frame, landmark, .. } = f {
                if c > chi2 {
                    self.unobserve(*landmark, *frame);
                    removed += 1;
                }
            }
        }
        let weak: Vec<usize> = self
            .points
            .iter()
            .filter(|(_, p)| p.observations.len() < 2)
            .map(|(id, _)| *id)
            .collect();
        for id in &weak {
            self.remove_point(*id);
        }
        Ok((removed, weak.len()))
    }

    /// Inserts a keyframe, triangulates new points against the window and
    /// runs local BA. `matched` lists the tracking inliers as (point, pixel).
    pub fn insert_keyframe(
        &mut self,
        est: &Estimator,
        mut kf: Keyframe,
        matched: &[(usize, Vector2<f64>)],
        temporal_edge: bool,
    ) -> Result<BaSummary, MappingError> {
        let cfg = est.config;
        let id = kf.id;
        kf.prev = self.last_keyframe().map(|k| k.id);
        kf.matched.clear();
        self.keyframes.insert(id, kf);
        for (pid, px) in matched {
            self.observe(*pid, id, *px);
        }
        self.triangulate_new(est, id);
        self.update_covisibility(id, temporal_edge, cfg.covisibility_min_shared);
        let summary = self.local_ba(est)?;
        for kf in &summary.window {
            self.update_covisibility(*kf, false, cfg.covisibility_min_shared);
        }
        if temporal_edge {
            self.update_covisibility(id, true, cfg.covisibility_min_shared);
        }
        Ok(summary)
    }

    fn triangulate_new(&mut self, est: &Estimator, id: usize) {
        let cfg = est.config;
        let window = self.window(cfg.window_size);
        let kf = self.keyframes[&id].clone();
        let local = self.by_source(self.local_points(cfg.window_size));
        for (src, px) in &kf.observations {
            if kf.matched.contains_key(src) {
                continue;
            }
            if let Some(pid) = local.get(src) {
                if self.points[pid].epoch == kf.epoch {
                    continue;
                }
            }
            // Partner keyframes with an unassociated view of the same landmark.
            let partners: Vec<(usize, Vector2<f64>)> = window
                .iter()
                .filter(|k| **k != id)
                .filter_map(|k| {
                    let other = &self.keyframes[k];
                    if other.matched.contains_key(src) {
                        return None;
                    }
                    other.observations.get(src).map(|p| (*k, *p))
                })
                .collect();
            let mut best: Option<(f64, Vector3<f64>)> = None;
            for (k, opx) in &partners {
                let other = &self.keyframes[k];
                if let Ok(x) = triangulate(
                    px,
                    opx,
                    &kf.state.pose,
                    &other.state.pose,
                    &est.calib.ext,
                    &est.calib.cam,
                    cfg.triangulation_min_parallax_deg,
                ) {
                    let base = (kf.state.pose.center() - other.state.pose.center()).norm();
                    if best.is_none_or(|(b, _)| base > b) {
                        best = Some((base, x));
                    }
                }
            }
            let Some((_, x)) = best else { continue };
            let mut views = vec![(id, *px)];
            for (k, opx) in &partners {
                let pose = &self.keyframes[k].state.pose;
                if let Ok(proj) = crate::sensors::project(&x, pose, &est.calib.ext, &est.calib.cam) {
                    let e = proj - opx;
                    if (e.transpose() * est.pixel_information() * e)[(0, 0)] <= cfg.outlier_chi2 {
                        views.push((*k, *opx));
                    }
                }
            }
            if views.len() < 2 {
                continue;
            }
            let pid = self.add_point(*src, x, kf.epoch);
            for (k, p) in views {
                self.observe(pid, k, p);
            }
        }
    }

    /// Windowed bundle adjustment over the newest keyframes.
    pub fn local_ba(&mut self, est: &Estimator) -> Result<BaSummary, MappingError> {
        let cfg = est.config;
        let window = self.window(cfg.window_size);
        let first_kf = self.keyframes.keys().next().copied();
        match self.build_and_solve(est, &window, first_kf, false) {
            Err(MappingError::Optimizer(OptimizerError::SingularSystem { .. })) => {
                self.build_and_solve(est, &window, first_kf, true)
            }
            other => other,
        }
    }

    fn build_and_solve(
        &mut self,
        est: &Estimator,
        window: &[usize],
        first_kf: Option<usize>,
        fix_oldest: bool,
    ) -> Result<BaSummary, MappingError> {
        let cfg = est.config;
        let in_window: BTreeSet<usize> = window.iter().copied().collect();
        let mut prob = est.problem();
        let mut point_ids = BTreeSet::new();
        for kf in window {
            for pid in self.keyframes[kf].matched.values() {
                if self.points[pid].observations.len() >= 2 {
                    point_ids.insert(*pid);
                }
            }
        }
        let mut fixed = BTreeSet::new();
        for pid in &point_ids {
            for kf in self.points[pid].observations.keys() {
                if !in_window.contains(kf) {
                    fixed.insert(*kf);
                }
            }
        }
        if let Some(pred) = window.first().and_then(|k| self.keyframes[k].prev) {
            fixed.insert(pred);
        }

        // Keyframes constrained by neither odometry nor enough points keep their pose.
        let mut obs_count: BTreeMap<usize, usize> = BTreeMap::new();
        for pid in &point_ids {
            for kf in self.points[pid].observations.keys() {
                *obs_count.entry(*kf).or_default() += 1;
            }
        }
        for (n, kf) in window.iter().enumerate() {
            let k = &self.keyframes[kf];
            let pose_fixed = Some(*kf) == first_kf
                || (fix_oldest && n == 0)
                || (!k.has_odometer_factor() && obs_count.get(kf).copied().unwrap_or(0) < cfg.min_inliers);
            prob.frames.insert(*kf, FrameVar { state: k.state, fix_pose: pose_fixed, fix_bias: false });
        }
        for kf in &fixed {
            prob.frames.insert(*kf, FrameVar::fixed(self.keyframes[kf].state));
        }
        for pid in &point_ids {
            let p = &self.points[pid];
            prob.landmarks.insert(*pid, LandmarkVar { position: p.position, fixed: false });
            for (kf, px) in &p.observations {
                prob.factors.push(est.reprojection(*kf, *pid, *px));
            }
        }
        let mut odometer_factors = Vec::new();
        for kf in window {
            let k = &self.keyframes[kf];
            let Some(prev) = k.prev else { continue };
            if !prob.frames.contains_key(&prev) {
                continue;
            }
            if k.has_odometer_factor() {
                let preint = k.odometer.clone().expect("checked by has_odometer_factor");
                prob.factors.push(Factor::Odometer { i: prev, j: *kf, preint });
                odometer_factors.push((prev, *kf));
            }
            prob.factors.push(est.bias_walk(prev, *kf, k.dt_prev)?);
        }
        for kf in window {
            est.add_plane(&mut prob, *kf);
        }
        let report = prob.solve(&cfg.solve_options())?;
        self.apply_solution(&prob, window);
        let (removed_observations, removed_points) = self.cull_outliers(&prob, cfg.outlier_chi2)?;
        self.version += 1;
        Ok(BaSummary {
            report,
            window: window.to_vec(),
            fixed: fixed.into_iter().collect(),
            odometer_factors,
            removed_observations,
            removed_points,
        })
    }
}
