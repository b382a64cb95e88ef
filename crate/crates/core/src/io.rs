//! Text formats: sensor CSV logs, TUM trajectories, PLY map dumps and the
//! per-frame JSON-lines log.

use std::fmt::Write as _;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::manifold::Pose;
use crate::mapping::MapStore;
use crate::sensors::{FeatureObservation, GyroSample, WheelSample};
use crate::sim::SimTrace;
use crate::tracking::FrameResult;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const SENSOR_HEADER: &str = "\
# type,timestamp,fields...
# GYRO,t [s],wx [rad/s],wy [rad/s],wz [rad/s]
# WHEEL,t [s],left distance [m],right distance [m]  (distance since the previous sample)
# FEAT,t [s],frame,landmark,u [px],v [px]
";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SensorLog {
    pub gyro: Vec<GyroSample<f64>>,
    pub wheel: Vec<WheelSample<f64>>,
    pub features: Vec<(f64, FeatureObservation<f64>)>,
}

impl SensorLog {
    pub fn from_trace(trace: &SimTrace) -> Self {
        let features = trace
            .frames
            .iter()
            .flat_map(|f| f.observations.iter().map(move |o| (f.timestamp, *o)))
            .collect();
        Self { gyro: trace.gyro.clone(), wheel: trace.wheel.clone(), features }
    }
}

/// Records sorted by timestamp; ties keep GYRO, WHEEL, FEAT order.
pub fn write_sensor_csv(log: &SensorLog) -> String {
    let mut rows: Vec<(f64, u8, String)> = Vec::new();
    for g in &log.gyro {
        let w = g.omega;
        rows.push((g.timestamp, 0, format!("GYRO,{:.6},{:e},{:e},{:e}", g.timestamp, w.x, w.y, w.z)));
    }
    for s in &log.wheel {
        rows.push((s.timestamp, 1, format!("WHEEL,{:.6},{:e},{:e}", s.timestamp, s.dist_left, s.dist_right)));
    }
    for (t, o) in &log.features {
        rows.push((*t, 2, format!("FEAT,{:.6},{},{},{:.6},{:.6}", t, o.frame, o.landmark, o.pixel.x, o.pixel.y)));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = String::from(SENSOR_HEADER);
    for (_, _, r) in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

pub fn read_sensor_csv(text: &str) -> Result<SensorLog, IoError> {
    let mut log = SensorLog::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: &str| IoError::Parse { line: i + 1, message: m.to_string() };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |k: usize| -> Result<f64, IoError> {
            fields.get(k).ok_or_else(|| err("missing field"))?.parse::<f64>().map_err(|_| err("bad number"))
        };
        let int = |k: usize| -> Result<usize, IoError> {
            fields.get(k).ok_or_else(|| err("missing field"))?.parse::<usize>().map_err(|_| err("bad integer"))
        };
        match fields[0] {
            "GYRO" if fields.len() == 5 => log.gyro.push(GyroSample {
                timestamp: num(1)?,
                omega: Vector3::new(num(2)?, num(3)?, num(4)?),
            }),
            "WHEEL" if fields.len() == 4 => log.wheel.push(WheelSample {
                timestamp: num(1)?,
                dist_left: num(2)?,
                dist_right: num(3)?,
            }),
            "FEAT" if fields.len() == 6 => log.features.push((
                num(1)?,
                FeatureObservation { frame: int(2)?, landmark: int(3)?, pixel: Vector2::new(num(4)?, num(5)?) },
            )),
            "GYRO" | "WHEEL" | "FEAT" => return Err(err("wrong field count")),
            other => return Err(err(&format!("unknown record type '{other}'"))),
        }
    }
    Ok(log)
}

/// One TUM line per pose: `t tx ty tz qx qy qz qw` with the robot center
/// and orientation in the world frame.
pub fn write_tum(poses: &[(f64, Pose<f64>)]) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, p) in poses {
        let c = p.center();
        let q = p.world_rotation().to_quaternion();
        writeln!(out, "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}", c.x, c.y, c.z, q.i, q.j, q.k, q.w)
            .expect("writing to a String");
    }
    out
}

pub fn read_tum(text: &str) -> Result<Vec<(f64, Vector3<f64>, UnitQuaternion<f64>)>, IoError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| IoError::Parse { line: i + 1, message: "bad number".into() })?;
        if v.len() != 8 {
            return Err(IoError::Parse { line: i + 1, message: "expected 8 values".into() });
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]));
        out.push((v[0], Vector3::new(v[1], v[2], v[3]), q));
    }
    Ok(out)
}

/// ASCII PLY of the map points with keyframe poses as comments.
pub fn write_ply(map: &MapStore) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    for kf in map.keyframes.values() {
        let c = kf.state.pose.center();
        let q = kf.state.pose.world_rotation().to_quaternion();
        writeln!(
            out,
            "comment keyframe {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} slippage={} epoch={}",
            kf.id, kf.timestamp, c.x, c.y, c.z, q.i, q.j, q.k, q.w, kf.slippage, kf.epoch
        )
        .expect("writing to a String");
    }
    writeln!(out, "element vertex {}", map.points.len()).expect("writing to a String");
    out.push_str("property float x\nproperty float y\nproperty float z\nproperty int source\nproperty int epoch\nend_header\n");
    for p in map.points.values() {
        let x = p.position;
        writeln!(out, "{:.6} {:.6} {:.6} {} {}", x.x, x.y, x.z, p.source, p.epoch).expect("writing to a String");
    }
    out
}

/// One JSON object per frame.
pub fn write_frame_log(frames: &[FrameResult]) -> Result<String, IoError> {
    let mut out = String::new();
    for f in frames {
        let c = f.state.pose.center();
        let q = f.state.pose.world_rotation().to_quaternion();
        let b = f.state.bias;
        let v = serde_json::json!({
            "frame": f.frame,
            "timestamp": f.timestamp,
            "mode": f.mode,
            "inliers": f.inliers,
            "slippage": f.slippage,
            "keyframe": f.keyframe,
            "position": [c.x, c.y, c.z],
            "quaternion": [q.i, q.j, q.k, q.w],
            "bias": [b.x, b.y, b.z],
        });
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}
