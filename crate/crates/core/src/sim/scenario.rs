//! Scenario description, loaded from TOML.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::path::Segment;
use crate::sensors::CameraMount;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("failed to parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default)]
    pub motion: Motion,
    pub path: Vec<Segment>,
    #[serde(default)]
    pub noise: SimNoise,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub landmarks: Vec<LandmarkField>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    /// Fraction of visible landmarks dropped from oracle matches.
    #[serde(default)]
    pub dropout: f64,
}

fn default_name() -> String {
    "scenario".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Rates {
    pub gyro: f64,
    pub wheel: f64,
    pub camera: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self { gyro: 50.0, wheel: 50.0, camera: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Motion {
    pub max_speed: f64,
    pub accel: f64,
    /// Distance between the wheels (m).
    pub track_width: f64,
}

impl Default for Motion {
    fn default() -> Self {
        Self { max_speed: 1.0, accel: 0.5, track_width: 0.4 }
    }
}

/// Standard deviations of the simulated sensors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimNoise {
    /// Per-axis gyro noise per sample (rad/s).
    pub gyro: f64,
    /// Per-wheel distance noise per sample (m).
    pub encoder: f64,
    pub pixel: f64,
    /// Gyro bias random walk (rad/s/√s).
    pub bias_walk: f64,
    pub initial_bias: [f64; 3],
}

impl Default for SimNoise {
    fn default() -> Self {
        Self {
            gyro: 1e-3,
            encoder: 1e-3,
            pixel: 0.5,
            bias_walk: 1e-5,
            initial_bias: [0.0; 3],
        }
    }
}

impl SimNoise {
    pub fn zero() -> Self {
        Self { gyro: 0.0, encoder: 0.0, pixel: 0.0, bias_walk: 0.0, initial_bias: [0.0; 3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSpec {
    pub mount: CameraMount,
    /// Camera center in the odometer frame (m).
    pub offset: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub min_depth: f64,
    pub max_range: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            mount: CameraMount::Forward,
            offset: [0.1, 0.0, 0.3],
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
            min_depth: 0.5,
            max_range: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LandmarkField {
    /// Points scattered along both sides of the path.
    Corridor {
        count: usize,
        /// Lateral distance range from the path centerline (m).
        lateral: [f64; 2],
        /// Height range above the ground (m).
        height: [f64; 2],
        /// Arc-length range along the path; the whole path when absent.
        #[serde(default)]
        s_range: Option<[f64; 2]>,
    },
    /// Points uniform in an axis-aligned world box.
    Box { count: usize, min: [f64; 3], max: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// Robot held in place while both wheels spin through `distance`.
    WheelSlip { start: f64, duration: f64, distance: f64 },
    /// Robot carried by a body-frame `[dx, dy, dyaw_deg]` while the wheels idle.
    Carry { start: f64, duration: f64, displacement: [f64; 3] },
    /// No visual observations.
    Blackout { start: f64, duration: f64 },
}

impl Fault {
    pub fn interval(&self) -> (f64, f64) {
        match *self {
            Fault::WheelSlip { start, duration, .. }
            | Fault::Carry { start, duration, .. }
            | Fault::Blackout { start, duration } => (start, start + duration),
        }
    }

    /// Whether the path clock stops during the fault.
    pub fn pauses_path(&self) -> bool {
        !matches!(self, Fault::Blackout { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Fault::WheelSlip { .. } => "wheel_slip",
            Fault::Carry { .. } => "carry",
            Fault::Blackout { .. } => "blackout",
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Wheel samples per camera frame and gyro samples per wheel sample.
    pub fn rate_ratios(&self) -> Result<(usize, usize), ScenarioError> {
        let r = &self.rates;
        let ratio = |a: f64, b: f64, what: &str| {
            let q = a / b;
            if (q - q.round()).abs() > 1e-9 || q.round() < 1.0 {
                Err(ScenarioError::Invalid(format!("{what} must be an integer multiple")))
            } else {
                Ok(q.round() as usize)
            }
        };
        Ok((
            ratio(r.wheel, r.camera, "wheel rate of the camera rate")?,
            ratio(r.gyro, r.wheel, "gyro rate of the wheel rate")?,
        ))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        let r = &self.rates;
        if !(r.gyro > 0.0 && r.wheel > 0.0 && r.camera > 0.0) {
            return bad("all rates must be positive");
        }
        self.rate_ratios()?;
        if self.path.is_empty() {
            return bad("path has no segments");
        }
        for seg in &self.path {
            let ok = match *seg {
                Segment::Line { length } => length > 0.0,
                Segment::Arc { radius, angle_deg } => radius > 0.0 && angle_deg != 0.0,
            };
            if !ok {
                return bad("path segments need positive length and radius");
            }
        }
        let m = &self.motion;
        if !(m.max_speed > 0.0 && m.accel > 0.0 && m.track_width > 0.0) {
            return bad("speed, acceleration and track width must be positive");
        }
        let n = &self.noise;
        if [n.gyro, n.encoder, n.pixel, n.bias_walk].iter().any(|v| !(*v >= 0.0)) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        let c = &self.camera;
        if !(c.fx > 0.0 && c.fy > 0.0 && c.width > 0.0 && c.height > 0.0 && c.max_range > c.min_depth) {
            return bad("camera intrinsics must be positive");
        }
        for f in &self.landmarks {
            match f {
                LandmarkField::Corridor { lateral, height, .. } => {
                    if lateral[0] > lateral[1] || height[0] > height[1] {
                        return bad("landmark ranges must be ordered");
                    }
                }
                LandmarkField::Box { min, max, .. } => {
                    if (0..3).any(|k| min[k] > max[k]) {
                        return bad("landmark box must be ordered");
                    }
                }
            }
        }
        let mut spans: Vec<(f64, f64)> = Vec::new();
        for f in &self.faults {
            let (a, b) = f.interval();
            if !(a >= 0.0 && b > a) {
                return bad("fault intervals need a non-negative start and positive duration");
            }
            if let Fault::WheelSlip { distance, .. } = f {
                if !(*distance >= 0.0) {
                    return bad("slip distance must be non-negative");
                }
            }
            if spans.iter().any(|&(c, d)| a < d && c < b) {
                return bad("fault intervals overlap");
            }
            spans.push((a, b));
        }
        Ok(())
    }
}
