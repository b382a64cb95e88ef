//! Wheel-odometer, gyroscope and monocular-camera SLAM for ground robots.

pub mod config;
pub mod eval;
pub mod factors;
pub mod io;
pub mod manifold;
pub mod mapping;
pub mod optimizer;
pub mod pipeline;
pub mod preintegration;
pub mod rng;
mod scalar;
pub mod sensors;
pub mod sim;
pub mod tracking;

pub use scalar::Real;

/// Double-precision aliases used by the pipeline.
pub type Rotation = manifold::Rotation<f64>;
pub type Pose = manifold::Pose<f64>;
pub type FrameState = factors::FrameState<f64>;
pub type Factor = factors::Factor<f64>;
pub type Calibration = factors::Calibration<f64>;
pub type PreintegratedOdometer = preintegration::PreintegratedOdometer<f64>;
pub type NoiseParams = sensors::NoiseParams<f64>;
pub type Problem = optimizer::Problem<f64>;

/// Single-precision aliases.
pub type Rotation32 = manifold::Rotation<f32>;
pub type Pose32 = manifold::Pose<f32>;
pub type PreintegratedOdometer32 = preintegration::PreintegratedOdometer<f32>;
