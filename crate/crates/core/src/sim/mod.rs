//! Deterministic synthetic world: ground truth, sensor streams, faults and
//! oracle data association.
//!
//! Ground truth is advanced once per wheel interval with the discrete
//! unicycle model `p ← p + d·(cos θ, sin θ)`, `θ ← θ + Δθ`, which is the
//! model the odometer preintegration assumes. The gyro reports the
//! interval's constant true rate, so noise-free streams integrate back to
//! the ground truth up to rounding.

pub mod path;
pub mod scenario;

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::manifold::{Pose, Rotation};
use crate::rng::{NoiseRng, Stream};
use crate::sensors::{CameraModel, Extrinsics, FeatureObservation, GyroSample, WheelSample};
pub use path::{Path, Segment, SpeedProfile};
pub use scenario::{CameraSpec, Fault, LandmarkField, Motion, Rates, Scenario, ScenarioError, SimNoise};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    WheelSlip,
    Carry,
    Blackout,
}

impl From<&Fault> for FaultKind {
    fn from(f: &Fault) -> Self {
        match f {
            Fault::WheelSlip { .. } => FaultKind::WheelSlip,
            Fault::Carry { .. } => FaultKind::Carry,
            Fault::Blackout { .. } => FaultKind::Blackout,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimFrame {
    pub index: usize,
    pub timestamp: f64,
    pub truth: Pose<f64>,
    pub bias: Vector3<f64>,
    /// Every landmark visible in this frame with its noisy pixel.
    pub observations: Vec<FeatureObservation<f64>>,
    pub fault: Option<FaultKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    pub name: String,
    pub seed: u64,
    pub gyro: Vec<GyroSample<f64>>,
    pub wheel: Vec<WheelSample<f64>>,
    pub frames: Vec<SimFrame>,
    pub landmarks: Vec<Vector3<f64>>,
    /// Ground truth at every wheel sample.
    pub wheel_truth: Vec<Pose<f64>>,
    pub ext: Extrinsics<f64>,
    pub cam: CameraModel<f64>,
    pub wheels_per_frame: usize,
    pub faults: Vec<Fault>,
    pub noise: SimNoise,
    pub dropout: f64,
    /// Length of the planned path (m).
    pub path_length: f64,
}

/// Per-interval truth increments.
struct Interval {
    d: f64,
    dtheta: f64,
    lateral: f64,
    reported: f64,
    fault: Option<FaultKind>,
}

fn ticks(t: f64, rate: f64) -> usize {
    (t * rate).round().max(0.0) as usize
}

/// Generates the trace for `scenario` with noise drawn from `seed`.
pub fn generate(scenario: &Scenario, seed: u64) -> Result<SimTrace, ScenarioError> {
    scenario.validate()?;
    let (wpf, gpw) = scenario.rate_ratios()?;
    let fw = scenario.rates.wheel;
    let dt = 1.0 / fw;
    let path = Path::new(scenario.path.clone());
    let profile = SpeedProfile::new(path.length(), scenario.motion.max_speed, scenario.motion.accel);

    // Fault spans in wheel ticks.
    let spans: Vec<(usize, usize, Fault)> = scenario
        .faults
        .iter()
        .map(|f| {
            let (a, b) = f.interval();
            (ticks(a, fw), ticks(b, fw).max(ticks(a, fw) + 1), *f)
        })
        .collect();
    let pause_ticks: usize = spans.iter().filter(|s| s.2.pauses_path()).map(|s| s.1 - s.0).sum();
    let drive_ticks = (profile.duration() * fw).ceil() as usize;
    let mut n_w = drive_ticks + pause_ticks;
    for (_, b, _) in &spans {
        n_w = n_w.max(*b);
    }
    n_w = n_w.div_ceil(wpf) * wpf;

    let fault_at = |k: usize| spans.iter().find(|(a, b, _)| k > *a && k <= *b).map(|s| s.2);

    // Interval k runs from tick k−1 to tick k.
    let mut intervals = Vec::with_capacity(n_w);
    let mut clock_ticks = 0usize;
    for k in 1..=n_w {
        let fault = fault_at(k);
        let iv = match fault {
            Some(Fault::WheelSlip { distance, .. }) => {
                let n = spans.iter().find(|s| k > s.0 && k <= s.1).map_or(1, |s| s.1 - s.0);
                Interval { d: 0.0, dtheta: 0.0, lateral: 0.0, reported: distance / n as f64, fault: Some(FaultKind::WheelSlip) }
            }
            Some(Fault::Carry { displacement, .. }) => {
                let n = spans.iter().find(|s| k > s.0 && k <= s.1).map_or(1, |s| s.1 - s.0) as f64;
                Interval {
                    d: displacement[0] / n,
                    dtheta: displacement[2].to_radians() / n,
                    lateral: displacement[1] / n,
                    reported: 0.0,
                    fault: Some(FaultKind::Carry),
                }
            }
            other => {
                let s0 = profile.distance_at(clock_ticks as f64 * dt);
                clock_ticks += 1;
                let s1 = profile.distance_at(clock_ticks as f64 * dt);
                let dtheta = path.heading(s1) - path.heading(s0);
                Interval { d: s1 - s0, dtheta, lateral: 0.0, reported: s1 - s0, fault: other.as_ref().map(FaultKind::from) }
            }
        };
        intervals.push(iv);
    }

    // Ground truth and wheel readings.
    let half_track = 0.5 * scenario.motion.track_width;
    let noise = scenario.noise;
    let mut wheel_rng = NoiseRng::new(seed, Stream::Wheel);
    let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
    let mut wheel_truth = Vec::with_capacity(n_w + 1);
    let mut wheel = Vec::with_capacity(n_w + 1);
    wheel_truth.push(Pose::from_planar(x, y, yaw));
    wheel.push(WheelSample { timestamp: 0.0, dist_left: 0.0, dist_right: 0.0 });
    for (i, iv) in intervals.iter().enumerate() {
        let (c, s) = (yaw.cos(), yaw.sin());
        x += iv.d * c - iv.lateral * s;
        y += iv.d * s + iv.lateral * c;
        yaw += iv.dtheta;
        wheel_truth.push(Pose::from_planar(x, y, yaw));
        let turn = if iv.fault == Some(FaultKind::Carry) || iv.fault == Some(FaultKind::WheelSlip) {
            0.0
        } else {
            iv.dtheta * half_track
        };
        let dl = iv.reported - turn + wheel_rng.gaussian(noise.encoder);
        let dr = iv.reported + turn + wheel_rng.gaussian(noise.encoder);
        wheel.push(WheelSample { timestamp: (i + 1) as f64 * dt, dist_left: dl, dist_right: dr });
    }

    // Gyro: each sample reports the true rate of the interval it opens.
    let fg = scenario.rates.gyro;
    let dtg = 1.0 / fg;
    let mut gyro_rng = NoiseRng::new(seed, Stream::Gyro);
    let mut bias_rng = NoiseRng::new(seed, Stream::BiasWalk);
    let mut bias = Vector3::from(noise.initial_bias);
    let n_g = n_w * gpw;
    let mut gyro = Vec::with_capacity(n_g + 1);
    let mut bias_at_gyro = Vec::with_capacity(n_g + 1);
    let walk = noise.bias_walk * dtg.sqrt();
    for j in 0..=n_g {
        if j > 0 {
            bias += Vector3::new(bias_rng.gaussian(walk), bias_rng.gaussian(walk), bias_rng.gaussian(walk));
        }
        let k = (j / gpw).min(n_w - 1);
        let rate = intervals[k].dtheta / dt;
        let eta = Vector3::new(
            gyro_rng.gaussian(noise.gyro),
            gyro_rng.gaussian(noise.gyro),
            gyro_rng.gaussian(noise.gyro),
        );
        gyro.push(GyroSample { timestamp: j as f64 * dtg, omega: Vector3::new(0.0, 0.0, rate) + bias + eta });
        bias_at_gyro.push(bias);
    }

    let landmarks = place_landmarks(scenario, &path, seed);
    let c = &scenario.camera;
    let ext = Extrinsics::mounted(c.mount, Vector3::from(c.offset));
    let cam = CameraModel { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height };

    let mut pixel_rng = NoiseRng::new(seed, Stream::Pixel);
    let n_frames = n_w / wpf + 1;
    let mut frames = Vec::with_capacity(n_frames);
    for j in 0..n_frames {
        let tick = j * wpf;
        let timestamp = tick as f64 * dt;
        let truth = wheel_truth[tick];
        let blackout = spans
            .iter()
            .any(|(a, b, f)| matches!(f, Fault::Blackout { .. }) && tick >= *a && tick < *b);
        let fault = if blackout {
            Some(FaultKind::Blackout)
        } else if tick > 0 {
            intervals[tick - 1].fault
        } else {
            None
        };
        let observations = if blackout {
            Vec::new()
        } else {
            observe(&landmarks, &truth, &ext, &cam, c, j, noise.pixel, &mut pixel_rng)
        };
        frames.push(SimFrame {
            index: j,
            timestamp,
            truth,
            bias: bias_at_gyro[tick * gpw],
            observations,
            fault,
        });
    }

    Ok(SimTrace {
        name: scenario.name.clone(),
        seed,
        gyro,
        wheel,
        frames,
        landmarks,
        wheel_truth,
        ext,
        cam,
        wheels_per_frame: wpf,
        faults: scenario.faults.clone(),
        noise,
        dropout: scenario.dropout,
        path_length: path.length(),
    })
}

#[allow(clippy::too_many_arguments)]
fn observe(
    landmarks: &[Vector3<f64>],
    truth: &Pose<f64>,
    ext: &Extrinsics<f64>,
    cam: &CameraModel<f64>,
    spec: &CameraSpec,
    frame: usize,
    sigma: f64,
    rng: &mut NoiseRng,
) -> Vec<FeatureObservation<f64>> {
    let cam_pose = ext.camera_pose(truth);
    let mut out = Vec::new();
    for (id, f) in landmarks.iter().enumerate() {
        let p_c = cam_pose.transform(f);
        if p_c.z < spec.min_depth || p_c.norm() > spec.max_range {
            continue;
        }
        let Ok(px) = cam.project_camera_point(&p_c) else { continue };
        if !cam.in_bounds(&px) {
            continue;
        }
        let noisy = px + Vector2::new(rng.gaussian(sigma), rng.gaussian(sigma));
        out.push(FeatureObservation { frame, landmark: id, pixel: noisy });
    }
    out
}

fn place_landmarks(scenario: &Scenario, path: &Path, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = NoiseRng::new(seed, Stream::Landmarks);
    let mut out = Vec::new();
    for field in &scenario.landmarks {
        match field {
            LandmarkField::Corridor { count, lateral, height, s_range } => {
                let [s0, s1] = s_range.unwrap_or([0.0, path.length()]);
                for _ in 0..*count {
                    let s = rng.uniform_range(s0, s1);
                    let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                    let off = side * rng.uniform_range(lateral[0], lateral[1]);
                    let z = rng.uniform_range(height[0], height[1]);
                    let (x, y) = path.position(s);
                    let h = path.heading(s);
                    out.push(Vector3::new(x - off * h.sin(), y + off * h.cos(), z));
                }
            }
            LandmarkField::Box { count, min, max } => {
                for _ in 0..*count {
                    out.push(Vector3::new(
                        rng.uniform_range(min[0], max[0]),
                        rng.uniform_range(min[1], max[1]),
                        rng.uniform_range(min[2], max[2]),
                    ));
                }
            }
        }
    }
    out
}

impl SimTrace {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Observations of `frame` whose landmark satisfies `wanted`, with the
    /// scenario's dropout applied. The dropout pattern depends only on the
    /// seed and frame index.
    pub fn oracle_matches(
        &self,
        frame: usize,
        wanted: impl Fn(usize) -> bool,
    ) -> Vec<FeatureObservation<f64>> {
        let Some(f) = self.frames.get(frame) else { return Vec::new() };
        let mut rng = NoiseRng::with_stream_id(
            self.seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            Stream::Dropout as u64,
        );
        f.observations
            .iter()
            .filter(|o| rng.uniform() >= self.dropout && wanted(o.landmark))
            .copied()
            .collect()
    }

    /// Oracle matches restricted to a set of landmark ids.
    pub fn oracle_matches_in(&self, frame: usize, ids: &BTreeSet<usize>) -> Vec<FeatureObservation<f64>> {
        self.oracle_matches(frame, |l| ids.contains(&l))
    }

    /// Actual distance driven by the ground truth.
    pub fn travelled_distance(&self) -> f64 {
        self.frames
            .windows(2)
            .map(|w| (w[1].truth.center() - w[0].truth.center()).norm())
            .sum()
    }

    pub fn truth_yaw(&self, frame: usize) -> f64 {
        let r: Rotation<f64> = self.frames[frame].truth.world_rotation();
        r.matrix()[(1, 0)].atan2(r.matrix()[(0, 0)])
    }
}
