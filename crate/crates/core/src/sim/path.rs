//! Planar path made of lines and circular arcs, driven with a trapezoidal
//! speed profile.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Segment {
    Line { length: f64 },
    /// Signed turn angle in degrees; positive turns left.
    Arc { radius: f64, angle_deg: f64 },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Line { length } => length,
            Segment::Arc { radius, angle_deg } => radius * angle_deg.to_radians().abs(),
        }
    }

    fn curvature(&self) -> f64 {
        match *self {
            Segment::Line { .. } => 0.0,
            Segment::Arc { radius, angle_deg } => angle_deg.signum() / radius,
        }
    }
}

/// Arc-length parameterized heading along a chain of segments.
#[derive(Clone, Debug)]
pub struct Path {
    segments: Vec<Segment>,
    starts: Vec<f64>,
    headings: Vec<f64>,
    total: f64,
}

impl Path {
    pub fn new(segments: Vec<Segment>) -> Self {
        let mut starts = Vec::with_capacity(segments.len());
        let mut headings = Vec::with_capacity(segments.len());
        let (mut s, mut h) = (0.0, 0.0);
        for seg in &segments {
            starts.push(s);
            headings.push(h);
            s += seg.length();
            h += seg.curvature() * seg.length();
        }
        Self { segments, starts, headings, total: s }
    }

    pub fn length(&self) -> f64 {
        self.total
    }

    /// Heading (yaw, rad) at arc length `s`, clamped to the path.
    pub fn heading(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.total);
        let k = self.starts.partition_point(|&v| v <= s).saturating_sub(1);
        match self.segments.get(k) {
            Some(seg) => self.headings[k] + seg.curvature() * (s - self.starts[k]),
            None => 0.0,
        }
    }

    /// Continuous planar position at arc length `s`.
    pub fn position(&self, s: f64) -> (f64, f64) {
        let s = s.clamp(0.0, self.total);
        let (mut x, mut y) = (0.0, 0.0);
        for (k, seg) in self.segments.iter().enumerate() {
            let start = self.starts[k];
            if start >= s {
                break;
            }
            let len = (s - start).min(seg.length());
            let h0 = self.headings[k];
            let c = seg.curvature();
            if c == 0.0 {
                x += len * h0.cos();
                y += len * h0.sin();
            } else {
                let h1 = h0 + c * len;
                x += (h1.sin() - h0.sin()) / c;
                y -= (h1.cos() - h0.cos()) / c;
            }
        }
        (x, y)
    }
}

/// Trapezoidal speed profile from rest to rest over a given distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedProfile {
    distance: f64,
    accel: f64,
    peak: f64,
    ramp_time: f64,
    cruise_time: f64,
}

impl SpeedProfile {
    pub fn new(distance: f64, max_speed: f64, accel: f64) -> Self {
        // Triangular profile when the distance is too short to reach max_speed.
        let peak = max_speed.min((distance * accel).sqrt());
        let ramp_time = peak / accel;
        let ramp_dist = peak * ramp_time;
        let cruise_time = if peak > 0.0 { (distance - ramp_dist) / peak } else { 0.0 };
        Self { distance, accel, peak, ramp_time, cruise_time: cruise_time.max(0.0) }
    }

    pub fn duration(&self) -> f64 {
        2.0 * self.ramp_time + self.cruise_time
    }

    /// Distance travelled after `t` seconds of driving.
    pub fn distance_at(&self, t: f64) -> f64 {
        let (a, tr, tc) = (self.accel, self.ramp_time, self.cruise_time);
        if t <= 0.0 {
            0.0
        } else if t < tr {
            0.5 * a * t * t
        } else if t < tr + tc {
            0.5 * a * tr * tr + self.peak * (t - tr)
        } else if t < 2.0 * tr + tc {
            let u = 2.0 * tr + tc - t;
            self.distance - 0.5 * a * u * u
        } else {
            self.distance
        }
    }
}
