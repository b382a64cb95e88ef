//! Estimator configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::SolveOptions;
use crate::sensors::NoiseParams;
use crate::sim::SimNoise;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    DeadReckoningOnly,
    NoPlaneFactor,
    NoSlippageDetector,
}

impl std::str::FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "dead-reckoning-only" => Ok(Mode::DeadReckoningOnly),
            "no-plane-factor" => Ok(Mode::NoPlaneFactor),
            "no-slippage-detector" => Ok(Mode::NoSlippageDetector),
            other => Err(ConfigError::Invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// Noise levels assumed by the estimator. Unset sensor sigmas are taken
/// from the scenario; every sigma is then raised to its floor so that a
/// noise-free scenario still yields finite information matrices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorNoise {
    pub gyro: Option<f64>,
    pub encoder: Option<f64>,
    pub pixel: Option<f64>,
    pub bias_walk: Option<f64>,
    pub gyro_floor: f64,
    pub encoder_floor: f64,
    pub pixel_floor: f64,
    pub bias_walk_floor: f64,
    /// Roll/pitch deviation from the ground plane (rad).
    pub plane_rotation: f64,
    /// Height deviation from the ground plane (m).
    pub plane_height: f64,
    /// Variance on the lateral and vertical wheel displacement (m²).
    pub lateral_floor: f64,
    /// Prior on the initial gyro bias (rad/s).
    pub initial_bias_sigma: f64,
}

impl Default for EstimatorNoise {
    fn default() -> Self {
        Self {
            gyro: None,
            encoder: None,
            pixel: None,
            bias_walk: None,
            gyro_floor: 1e-4,
            encoder_floor: 1e-4,
            pixel_floor: 0.1,
            bias_walk_floor: 1e-6,
            plane_rotation: 0.0002,
            plane_height: 0.001,
            lateral_floor: 1e-8,
            initial_bias_sigma: 0.01,
        }
    }
}

impl EstimatorNoise {
    pub fn resolve(&self, sim: &SimNoise) -> NoiseParams<f64> {
        let g = self.gyro.unwrap_or(sim.gyro).max(self.gyro_floor);
        let e = self.encoder.unwrap_or(sim.encoder).max(self.encoder_floor);
        let p = self.pixel.unwrap_or(sim.pixel).max(self.pixel_floor);
        let b = self.bias_walk.unwrap_or(sim.bias_walk).max(self.bias_walk_floor);
        let mut n = NoiseParams::from_sigmas(g, e, b, self.plane_rotation, self.plane_height, p);
        n.lateral_floor = self.lateral_floor;
        n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub window_size: usize,
    pub min_inliers: usize,
    pub outlier_chi2: f64,
    pub huber_delta: f64,
    pub outlier_rounds: usize,
    pub init_min_matches: usize,
    pub init_min_parallax_deg: f64,
    pub init_min_points: usize,
    pub triangulation_min_parallax_deg: f64,
    pub covisibility_min_shared: usize,
    pub keyframe_track_ratio: f64,
    pub lost_keyframe_distance: f64,
    pub lost_keyframe_angle_deg: f64,
    pub mapping_busy_frames: usize,
    pub max_iterations: usize,
    pub noise: EstimatorNoise,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            window_size: 10,
            min_inliers: 15,
            outlier_chi2: 5.991,
            huber_delta: 2.447,
            outlier_rounds: 2,
            init_min_matches: 50,
            init_min_parallax_deg: 5.0,
            init_min_points: 50,
            triangulation_min_parallax_deg: 1.0,
            covisibility_min_shared: 15,
            keyframe_track_ratio: 0.5,
            lost_keyframe_distance: 0.3,
            lost_keyframe_angle_deg: 10.0,
            mapping_busy_frames: 6,
            max_iterations: 20,
            noise: EstimatorNoise::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: PipelineConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.window_size < 2 {
            return bad("window_size must be at least 2");
        }
        if self.min_inliers == 0 || self.init_min_points == 0 {
            return bad("inlier and point minimums must be positive");
        }
        if !(self.outlier_chi2 > 0.0 && self.huber_delta > 0.0) {
            return bad("outlier_chi2 and huber_delta must be positive");
        }
        if !(self.keyframe_track_ratio > 0.0 && self.keyframe_track_ratio <= 1.0) {
            return bad("keyframe_track_ratio must be in (0, 1]");
        }
        if self.outlier_rounds == 0 || self.max_iterations == 0 {
            return bad("outlier_rounds and max_iterations must be positive");
        }
        Ok(())
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions { max_iterations: self.max_iterations, gradient_tolerance: f64::INFINITY, ..SolveOptions::default() }
    }

    pub fn use_plane(&self) -> bool {
        self.mode != Mode::NoPlaneFactor
    }

    pub fn detect_slippage(&self) -> bool {
        self.mode != Mode::NoSlippageDetector
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn floors_apply_to_zero_noise() {
        let n = EstimatorNoise::default().resolve(&SimNoise::zero());
        assert_eq!(n.encoder, 1e-8);
        assert!((n.pixel[(0, 0)] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn explicit_values_override_scenario() {
        let e = EstimatorNoise { pixel: Some(2.0), ..Default::default() };
        let n = e.resolve(&SimNoise::default());
        assert_eq!(n.pixel[(0, 0)], 4.0);
    }

    #[test]
    fn mode_parses() {
        assert_eq!("no-plane-factor".parse::<Mode>().unwrap(), Mode::NoPlaneFactor);
        assert!("fast".parse::<Mode>().is_err());
        let c = PipelineConfig::from_toml("mode = \"dead-reckoning-only\"").unwrap();
        assert_eq!(c.mode, Mode::DeadReckoningOnly);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::from_toml("window_size = 1").is_err());
        assert!(PipelineConfig::from_toml("unknown = 3").is_err());
    }
}
