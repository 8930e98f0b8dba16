use serde::{Deserialize, Serialize};

use super::dtw::WarpPath;
use crate::error::{Error, Result};

/// Monotone piecewise-linear map from piano time to song time. Queries
/// outside the knot span clamp to the end values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    knots: Vec<(f64, f64)>,
}

impl TimeMap {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::invalid("time map needs at least one knot"));
        }
        if knots.iter().any(|k| !k.0.is_finite() || !k.1.is_finite()) {
            return Err(Error::invalid("time map knots must be finite"));
        }
        if knots.windows(2).any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1) {
            return Err(Error::invalid("time map knots must be non-decreasing"));
        }
        Ok(TimeMap { knots })
    }

    pub fn identity(length: f64) -> Self {
        TimeMap { knots: vec![(0.0, 0.0), (length, length)] }
    }

    /// `t_song = slope * t_piano` over `[0, length]`.
    pub fn linear(slope: f64, length: f64) -> Result<Self> {
        TimeMap::new(vec![(0.0, 0.0), (length, slope * length)])
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn eval(&self, t: f64) -> f64 {
        let first = self.knots[0];
        let last = *self.knots.last().unwrap();
        if t <= first.0 {
            return first.1;
        }
        if t >= last.0 {
            return last.1;
        }
        let idx = self.knots.partition_point(|k| k.0 <= t);
        let (x0, y0) = self.knots[idx - 1];
        let (x1, y1) = self.knots[idx];
        y0 + (t - x0) * (y1 - y0) / (x1 - x0)
    }

    pub fn piano_span(&self) -> (f64, f64) {
        (self.knots[0].0, self.knots.last().unwrap().0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("time map serializes")
    }
}

/// Converts frame-index pairs into second pairs.
pub fn time_map_from_path(path: &WarpPath, frame_rate: f64) -> Result<TimeMap> {
    if path.is_empty() {
        return Err(Error::invalid("empty warp path"));
    }
    TimeMap::new(path.points.iter().map(|&(i, j)| (i as f64 / frame_rate, j as f64 / frame_rate)).collect())
}
