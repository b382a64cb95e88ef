//! Deterministic single-threaded driver: tracking and mapping alternate
//! frame by frame over a simulated trace.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::config::{ConfigError, Mode, PipelineConfig};
use crate::factors::{Calibration, FrameState, PriorState};
use crate::mapping::{Estimator, InitFrame, Keyframe, MapStore, MappingError, NotReady};
use crate::optimizer::FrameVar;
use crate::preintegration::{PreintegratedOdometer, PreintegrationError};
use crate::sensors::{merge_streams, NoiseParams, OdometerStep, SensorError};
use crate::sim::SimTrace;
use crate::tracking::{
    detect_slippage, keyframe_decision, predict, FrameProblem, FrameResult, KeyframeCue, Match, TrackingMode,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Preintegration(#[from] PreintegrationError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("trace has no frames")]
    EmptyTrace,
    #[error("trace has {steps} odometer steps, fewer than {frames} frames need")]
    ShortOdometry { steps: usize, frames: usize },
}

/// One completed local bundle adjustment.
#[derive(Clone, Debug, PartialEq)]
pub struct BaRecord {
    pub keyframe: usize,
    pub window: Vec<usize>,
    pub odometer_factors: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub frames: Vec<FrameResult>,
    /// Odometry integrated with zero bias from the first frame.
    pub dead_reckoning: Vec<FrameState<f64>>,
    pub map: Option<MapStore>,
    /// Map right after initialization, before any further keyframe.
    pub init_map: Option<MapStore>,
    pub ba: Vec<BaRecord>,
    /// Local BAs skipped because the problem was singular or failed.
    pub ba_failures: usize,
}

impl RunOutput {
    pub fn keyframes(&self) -> Vec<usize> {
        self.frames.iter().filter(|f| f.keyframe).map(|f| f.frame).collect()
    }

    /// Every odometer factor that entered a local BA.
    pub fn odometer_factors(&self) -> BTreeSet<(usize, usize)> {
        self.ba.iter().flat_map(|b| b.odometer_factors.iter().copied()).collect()
    }
}

/// Per-frame poses from odometry alone with zero gyro bias.
pub fn dead_reckoning(
    steps: &[OdometerStep<f64>],
    wheels_per_frame: usize,
    frames: usize,
    calib: &Calibration<f64>,
) -> Result<Vec<FrameState<f64>>, PipelineError> {
    let mut state = FrameState::identity();
    let mut out = Vec::with_capacity(frames);
    out.push(state);
    let noise = NoiseParams::zero();
    for chunk in steps.chunks(wheels_per_frame).take(frames.saturating_sub(1)) {
        let p = PreintegratedOdometer::from_steps(chunk, state.bias, &calib.ext, &noise)?;
        state = predict(&state, &p);
        out.push(state);
    }
    Ok(out)
}

struct Tracked {
    result: FrameResult,
    prior: Option<Arc<PriorState<f64>>>,
    inliers: Vec<Match>,
    force_keyframe: bool,
    /// Some(true) when visual tracking is lost at this frame, Some(false) when regained.
    lost: Option<bool>,
}

struct LastFrame {
    frame: usize,
    state: FrameState<f64>,
    prior: Option<Arc<PriorState<f64>>>,
    matches: Vec<Match>,
}

struct Runner<'a> {
    trace: &'a SimTrace,
    est: Estimator<'a>,
    steps: Vec<OdometerStep<f64>>,
    map: Option<MapStore>,
    last: LastFrame,
    lost: bool,
    epoch: u32,
    seen_version: u64,
    busy: usize,
    reference: Option<InitFrame>,
    out: RunOutput,
}

impl Runner<'_> {
    fn preint(&self, a: usize, b: usize, bias: &nalgebra::Vector3<f64>) -> Result<Arc<PreintegratedOdometer<f64>>, PipelineError> {
        let w = self.trace.wheels_per_frame;
        let p = PreintegratedOdometer::from_steps(&self.steps[a * w..b * w], *bias, &self.est.calib.ext, self.est.noise)?;
        Ok(Arc::new(p))
    }

    fn t(&self, frame: usize) -> f64 {
        self.trace.frames[frame].timestamp
    }

    fn init_frame(&self, frame: usize, state: FrameState<f64>) -> InitFrame {
        InitFrame {
            id: frame,
            timestamp: self.t(frame),
            state,
            observations: self.trace.oracle_matches(frame, |_| true),
        }
    }

    fn push(&mut self, frame: usize, state: FrameState<f64>, mode: TrackingMode, inliers: usize, slippage: bool) {
        self.out.frames.push(FrameResult {
            frame,
            timestamp: self.t(frame),
            state,
            mode,
            inliers,
            slippage,
            keyframe: false,
        });
    }

    fn before_init(&mut self, k: usize) -> Result<(), PipelineError> {
        let p = self.preint(k - 1, k, &self.last.state.bias)?;
        let state = predict(&self.last.state, &p);
        self.push(k, state, TrackingMode::OdomOnly, 0, false);
        self.last = LastFrame { frame: k, state, prior: None, matches: Vec::new() };
        if self.est.config.mode == Mode::DeadReckoningOnly {
            return Ok(());
        }
        let current = self.init_frame(k, state);
        let Some(reference) = self.reference.clone() else {
            self.reference = Some(current);
            return Ok(());
        };
        let odo = self.preint(reference.id, k, &reference.state.bias)?;
        match crate::mapping::initialize_map(&self.est, &reference, &current, odo, self.epoch) {
            Ok(init) => {
                let kf = &init.map.keyframes[&k];
                let matches: Vec<Match> = kf
                    .matched
                    .values()
                    .map(|pid| Match { point: *pid, pixel: init.map.points[pid].observations[&k] })
                    .collect();
                let state = kf.state;
                let r = reference.id;
                if let Some(f) = self.out.frames.iter_mut().find(|f| f.frame == r) {
                    f.keyframe = true;
                }
                let f = self.out.frames.last_mut().expect("pushed above");
                f.state = state;
                f.mode = TrackingMode::MapUpdated;
                f.inliers = matches.len();
                f.keyframe = true;
                self.last = LastFrame { frame: k, state, prior: Some(init.prior), matches };
                self.seen_version = init.map.version;
                self.busy = self.est.config.mapping_busy_frames;
                self.out.init_map = Some(init.map.clone());
                self.map = Some(init.map);
                self.reference = None;
            }
            Err(MappingError::NotReady(NotReady::InsufficientMatches)) => self.reference = Some(current),
            Err(_) => {}
        }
        Ok(())
    }

    fn matches_for(&self, k: usize, by_source: &BTreeMap<usize, usize>) -> Vec<Match> {
        self.trace
            .oracle_matches(k, |l| by_source.contains_key(&l))
            .into_iter()
            .map(|o| Match { point: by_source[&o.landmark], pixel: o.pixel })
            .collect()
    }

    fn odom_only_prior(&self, guess: FrameState<f64>, odo: &Arc<PreintegratedOdometer<f64>>, dt: f64) -> Option<Arc<PriorState<f64>>> {
        let map = self.map.as_ref()?;
        let prior = self.last.prior.clone()?;
        let fp = FrameProblem {
            prev: FrameVar::free(self.last.state),
            prior: Some(prior.clone()),
            prev_matches: Vec::new(),
            guess,
            matches: Vec::new(),
            odometer: Some(odo.clone()),
            dt,
        };
        Some(
            fp.marginal_at_guess(&self.est, &map.points)
                .unwrap_or_else(|_| Arc::new(PriorState { mean: guess, information: prior.information })),
        )
    }

    /// Tracks frame `k` once a map exists.
    fn track(&self, k: usize) -> Result<Tracked, PipelineError> {
        let cfg = self.est.config;
        let map = self.map.as_ref().expect("tracking runs after initialization");
        let dt_last = self.t(k) - self.t(self.last.frame);
        let odo_last = self.preint(self.last.frame, k, &self.last.state.bias)?;
        let pred = predict(&self.last.state, &odo_last);
        let timestamp = self.t(k);
        let result = |state, mode, inliers, slippage| FrameResult {
            frame: k,
            timestamp,
            state,
            mode,
            inliers,
            slippage,
            keyframe: false,
        };

        if self.lost {
            // Relocalization against points of earlier epochs.
            let old = map.by_source(map.points.iter().filter(|(_, p)| p.epoch < self.epoch).map(|(id, _)| *id));
            let matches = self.matches_for(k, &old);
            if matches.len() >= cfg.min_inliers {
                let fp = FrameProblem {
                    prev: FrameVar::fixed(self.last.state),
                    prior: None,
                    prev_matches: Vec::new(),
                    guess: pred,
                    matches,
                    odometer: None,
                    dt: dt_last,
                };
                if let Ok(sol) = fp.solve(&self.est, &map.points) {
                    if sol.inliers.len() >= cfg.min_inliers {
                        let r = result(sol.state, TrackingMode::Reloc, sol.inliers.len(), false);
                        return Ok(Tracked { result: r, prior: Some(sol.prior), inliers: sol.inliers, force_keyframe: true, lost: Some(false) });
                    }
                }
            }
            // Localization in the map built since tracking was lost.
            if let Some(kf) = map.last_keyframe() {
                let fresh = map.by_source(kf.matched.values().copied().filter(|p| map.points[p].epoch == self.epoch));
                let matches = self.matches_for(k, &fresh);
                if matches.len() >= cfg.min_inliers && self.last.prior.is_some() {
                    let fp = FrameProblem {
                        prev: FrameVar::free(self.last.state),
                        prior: self.last.prior.clone(),
                        prev_matches: Vec::new(),
                        guess: pred,
                        matches,
                        odometer: Some(odo_last.clone()),
                        dt: dt_last,
                    };
                    if let Ok(sol) = fp.solve(&self.est, &map.points) {
                        if sol.inliers.len() >= cfg.min_inliers {
                            let r = result(sol.state, TrackingMode::NewMapLocal, sol.inliers.len(), false);
                            return Ok(Tracked { result: r, prior: Some(sol.prior), inliers: sol.inliers, force_keyframe: false, lost: Some(false) });
                        }
                    }
                }
            }
            let prior = self.odom_only_prior(pred, &odo_last, dt_last);
            let r = result(pred, TrackingMode::OdomOnly, 0, false);
            return Ok(Tracked { result: r, prior, inliers: Vec::new(), force_keyframe: false, lost: None });
        }

        let local = map.by_source(map.local_points(cfg.window_size));
        let matches = self.matches_for(k, &local);
        let map_updated = map.version != self.seen_version;
        let kf = map.last_keyframe().expect("map has keyframes");
        let (fp, mode) = if map_updated || self.last.prior.is_none() {
            let odo = self.preint(kf.id, k, &kf.state.bias)?;
            let fp = FrameProblem {
                prev: FrameVar::fixed(kf.state),
                prior: None,
                prev_matches: Vec::new(),
                guess: predict(&kf.state, &odo),
                matches: matches.clone(),
                odometer: Some(odo),
                dt: self.t(k) - kf.timestamp,
            };
            (fp, TrackingMode::MapUpdated)
        } else {
            let fp = FrameProblem {
                prev: FrameVar::free(self.last.state),
                prior: self.last.prior.clone(),
                prev_matches: self.last.matches.clone(),
                guess: pred,
                matches: matches.clone(),
                odometer: Some(odo_last.clone()),
                dt: dt_last,
            };
            (fp, TrackingMode::NoMapUpdate)
        };
        let sol = fp.solve(&self.est, &map.points).ok();
        // Slippage is judged on the points the last frame tracked as inliers.
        let tracked: BTreeSet<usize> = self.last.matches.iter().map(|m| m.point).collect();
        let pre = matches.iter().filter(|m| tracked.contains(&m.point)).count();
        let post = sol.as_ref().map_or(0, |s| s.inliers.iter().filter(|m| tracked.contains(&m.point)).count());

        if cfg.detect_slippage() && pre >= cfg.min_inliers && detect_slippage(pre, post) {
            let fp = FrameProblem {
                prev: FrameVar::fixed(self.last.state),
                prior: None,
                prev_matches: Vec::new(),
                guess: self.last.state,
                matches,
                odometer: None,
                dt: dt_last,
            };
            if let Ok(rec) = fp.solve(&self.est, &map.points) {
                if rec.inliers.len() >= cfg.min_inliers {
                    let r = result(rec.state, TrackingMode::SlippageRecovery, rec.inliers.len(), true);
                    return Ok(Tracked { result: r, prior: Some(rec.prior), inliers: rec.inliers, force_keyframe: true, lost: None });
                }
            }
            // Not enough support even without odometry: hold the last pose.
            let r = result(self.last.state, TrackingMode::SlippageRecovery, 0, true);
            return Ok(Tracked {
                result: r,
                prior: self.last.prior.clone(),
                inliers: Vec::new(),
                force_keyframe: true,
                lost: Some(true),
            });
        }
        match sol {
            Some(sol) if sol.inliers.len() >= cfg.min_inliers => {
                let r = result(sol.state, mode, sol.inliers.len(), false);
                Ok(Tracked { result: r, prior: Some(sol.prior), inliers: sol.inliers, force_keyframe: false, lost: None })
            }
            _ => {
                let prior = self.odom_only_prior(pred, &odo_last, dt_last);
                let r = result(pred, TrackingMode::OdomOnly, 0, false);
                Ok(Tracked { result: r, prior, inliers: Vec::new(), force_keyframe: false, lost: Some(true) })
            }
        }
    }

    fn after_init(&mut self, k: usize) -> Result<(), PipelineError> {
        let cfg = self.est.config;
        let ba_finished = if self.busy > 0 {
            self.busy -= 1;
            self.busy == 0
        } else {
            false
        };
        let Tracked { result: mut res, prior, inliers, force_keyframe: forced, lost } = self.track(k)?;
        if let Some(v) = self.map.as_ref().map(|m| m.version) {
            self.seen_version = v;
        }
        match lost {
            Some(true) => {
                self.lost = true;
                self.epoch += 1;
            }
            Some(false) => self.lost = false,
            None => {}
        }
        let map = self.map.as_ref().expect("initialized");
        let kf = map.last_keyframe().expect("map has keyframes");
        let (d_r, _) = kf.state.pose.relative_to(&res.state.pose);
        let cue = KeyframeCue {
            visual_lost: self.lost,
            inliers: res.inliers,
            last_kf_points: kf.matched.len(),
            distance: (res.state.pose.center() - kf.state.pose.center()).norm(),
            angle: d_r.angle(),
            ba_finished,
            forced,
        };
        if keyframe_decision(&cue, cfg) {
            res.keyframe = true;
            let odo = self.preint(kf.id, k, &kf.state.bias)?;
            let new_kf = Keyframe {
                id: k,
                timestamp: self.t(k),
                state: res.state,
                observations: self.trace.oracle_matches(k, |_| true).iter().map(|o| (o.landmark, o.pixel)).collect(),
                matched: BTreeMap::new(),
                slippage: res.slippage,
                relocalized: res.mode == TrackingMode::Reloc,
                prev: Some(kf.id),
                odometer: Some(odo),
                dt_prev: self.t(k) - kf.timestamp,
                epoch: self.epoch,
            };
            let matched: Vec<(usize, nalgebra::Vector2<f64>)> = inliers.iter().map(|m| (m.point, m.pixel)).collect();
            let temporal = self.lost;
            let est = self.est;
            let map = self.map.as_mut().expect("initialized");
            match map.insert_keyframe(&est, new_kf, &matched, temporal) {
                Ok(summary) => self.out.ba.push(BaRecord {
                    keyframe: k,
                    window: summary.window,
                    odometer_factors: summary.odometer_factors,
                }),
                Err(_) => self.out.ba_failures += 1,
            }
            self.busy = cfg.mapping_busy_frames.max(1);
        }
        self.last = LastFrame { frame: k, state: res.state, prior, matches: inliers };
        self.out.frames.push(res);
        Ok(())
    }
}

/// Runs the estimator over every frame of `trace`.
pub fn run(trace: &SimTrace, config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    if trace.frames.is_empty() {
        return Err(PipelineError::EmptyTrace);
    }
    let steps = merge_streams(&trace.gyro, &trace.wheel)?;
    let n = trace.frames.len();
    if steps.len() < (n - 1) * trace.wheels_per_frame {
        return Err(PipelineError::ShortOdometry { steps: steps.len(), frames: n });
    }
    let noise = config.noise.resolve(&trace.noise);
    let calib = Calibration { ext: trace.ext, cam: trace.cam };
    let dr = dead_reckoning(&steps, trace.wheels_per_frame, n, &calib)?;
    let est = Estimator { calib, noise: &noise, config };
    let first = FrameState::identity();
    let mut runner = Runner {
        trace,
        est,
        steps,
        map: None,
        last: LastFrame { frame: 0, state: first, prior: None, matches: Vec::new() },
        lost: false,
        epoch: 0,
        seen_version: 0,
        busy: 0,
        reference: None,
        out: RunOutput {
            frames: Vec::with_capacity(n),
            dead_reckoning: dr,
            map: None,
            init_map: None,
            ba: Vec::new(),
            ba_failures: 0,
        },
    };
    runner.push(0, first, TrackingMode::OdomOnly, 0, false);
    if config.mode != Mode::DeadReckoningOnly {
        runner.reference = Some(runner.init_frame(0, first));
    }
    for k in 1..n {
        if runner.map.is_none() {
            runner.before_init(k)?;
        } else {
            runner.after_init(k)?;
        }
    }
    runner.out.map = runner.map.take();
    Ok(runner.out)
}
