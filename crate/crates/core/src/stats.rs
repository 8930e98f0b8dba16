//! Deviation ratios between paired recordings.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::BeatGrid;
use crate::performance::PianoPerformance;

fn ratio(a: f64, b: f64, what: &str) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid(format!("{what} must be positive, got {a} and {b}")));
    }
    Ok(a.max(b) / a.min(b))
}

/// Longer duration divided by the shorter.
pub fn duration_deviation(len_a: f64, len_b: f64) -> Result<f64> {
    ratio(len_a, len_b, "lengths")
}

pub fn tempo_deviation(bpm_a: f64, bpm_b: f64) -> Result<f64> {
    ratio(bpm_a, bpm_b, "tempi")
}

pub fn grid_tempo_deviation(a: &BeatGrid, b: &BeatGrid) -> Result<f64> {
    let bpm = |g: &BeatGrid| g.estimate_bpm().ok_or_else(|| Error::invalid("grid needs two beats"));
    tempo_deviation(bpm(a)?, bpm(b)?)
}

/// Mean gap between consecutive sorted onsets.
pub fn mean_ioi(perf: &PianoPerformance) -> Result<f64> {
    let onsets = perf.onsets();
    if onsets.len() < 2 {
        return Err(Error::invalid("inter-onset intervals need at least two notes"));
    }
    Ok((onsets[onsets.len() - 1] - onsets[0]) / (onsets.len() - 1) as f64)
}

/// Ratio of mean inter-onset intervals, larger over smaller.
pub fn ioi_deviation(original: &PianoPerformance, remapped: &PianoPerformance) -> Result<f64> {
    if original.notes().len() != remapped.notes().len() {
        return Err(Error::invalid(format!(
            "note counts differ: {} vs {}",
            original.notes().len(),
            remapped.notes().len()
        )));
    }
    ratio(mean_ioi(original)?, mean_ioi(remapped)?, "mean IOIs")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    /// Population standard deviation; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Summary { mean, std: var.sqrt(), count: values.len() })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}
