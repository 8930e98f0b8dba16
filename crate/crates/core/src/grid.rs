//! Beat grids, bars and 16th-note quantization.
//!
//! Only 4/4 is supported: every complete bar spans exactly four beats and each
//! beat is divided into four 16th-note subdivisions, giving sixteen positions
//! per bar. A trailing partial bar (fewer than four beats) is allowed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::performance::TempoEvent;

pub const BEATS_PER_BAR: usize = 4;
pub const SUBDIVISIONS_PER_BEAT: usize = 4;
pub const POSITIONS_PER_BAR: usize = BEATS_PER_BAR * SUBDIVISIONS_PER_BEAT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatGrid {
    #[serde(rename = "beats")]
    beat_times: Vec<f64>,
    #[serde(rename = "downbeats")]
    downbeat_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bar {
    pub index: usize,
    pub start_beat: usize,
    pub end_beat: usize,
}

impl Bar {
    pub fn beats(&self) -> usize {
        self.end_beat - self.start_beat
    }
}

/// A quantized grid location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridPosition {
    pub bar: usize,
    /// Subdivision offset from the bar's first beat.
    pub position: usize,
    /// Subdivision index counted from the first beat of the grid.
    pub subdivision: usize,
}

impl BeatGrid {
    pub fn new(beat_times: Vec<f64>, downbeat_indices: Vec<usize>) -> Result<Self> {
        let grid = BeatGrid { beat_times, downbeat_indices };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        if self.beat_times.is_empty() {
            return Err(Error::invalid("beat grid has no beats"));
        }
        if self.beat_times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("beat times must be finite"));
        }
        if self.beat_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("beat times must be strictly increasing"));
        }
        if self.downbeat_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("downbeat indices must be strictly increasing"));
        }
        if let Some(&last) = self.downbeat_indices.last() {
            if last >= self.beat_times.len() {
                return Err(Error::invalid(format!(
                    "downbeat index {last} out of range for {} beats",
                    self.beat_times.len()
                )));
            }
        }
        Ok(())
    }

    /// Integrates a tempo map into beat times `t < length`, with a downbeat
    /// every `beats_per_bar` beats starting at beat 0.
    pub fn from_tempo(tempo_events: &[TempoEvent], length: f64, beats_per_bar: usize) -> Result<Self> {
        if tempo_events.is_empty() {
            return Err(Error::invalid("tempo map is empty"));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::invalid(format!("length {length} must be positive")));
        }
        if beats_per_bar != BEATS_PER_BAR {
            return Err(Error::UnsupportedMeter(format!("{beats_per_bar} beats per bar (only 4/4 is supported)")));
        }
        if tempo_events.iter().any(|e| !(e.bpm > 0.0) || !e.bpm.is_finite()) {
            return Err(Error::invalid("tempo must be positive"));
        }
        if tempo_events.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::invalid("tempo events must be sorted by time"));
        }

        // Segment boundaries: tempo before the first event is the first tempo.
        let mut segments: Vec<(f64, f64)> = Vec::with_capacity(tempo_events.len());
        for e in tempo_events {
            let start = e.time.max(0.0);
            match segments.last_mut() {
                Some(last) if last.0 == start => last.1 = e.bpm,
                Some(_) => segments.push((start, e.bpm)),
                None => segments.push((0.0, e.bpm)),
            }
        }

        let mut beats = Vec::new();
        let mut beat_pos = 0.0_f64; // accumulated beats at segment start
        let mut next_beat: u64 = 0;
        for (k, &(start, bpm)) in segments.iter().enumerate() {
            let end = segments.get(k + 1).map_or(length, |s| s.0.min(length));
            let period = 60.0 / bpm;
            loop {
                let t = start + (next_beat as f64 - beat_pos) * period;
                if t >= end || t >= length {
                    break;
                }
                beats.push(t);
                next_beat += 1;
            }
            beat_pos += (end - start) / period;
            if end >= length {
                break;
            }
        }
        let downbeats = (0..beats.len()).step_by(beats_per_bar).collect();
        BeatGrid::new(beats, downbeats)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: BeatGrid = serde_json::from_str(&text)?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("grid serializes")
    }

    pub fn beat_times(&self) -> &[f64] {
        &self.beat_times
    }

    pub fn downbeat_indices(&self) -> &[usize] {
        &self.downbeat_indices
    }

    pub fn count(&self) -> usize {
        self.beat_times.len()
    }

    pub fn first_time(&self) -> f64 {
        self.beat_times[0]
    }

    pub fn last_time(&self) -> f64 {
        *self.beat_times.last().unwrap()
    }

    /// Rejects grids whose bars are not four beats long. A final partial bar
    /// may be shorter.
    pub fn check_four_four(&self) -> Result<()> {
        for w in self.downbeat_indices.windows(2) {
            if w[1] - w[0] != BEATS_PER_BAR {
                return Err(Error::UnsupportedMeter(format!(
                    "bar starting at beat {} spans {} beats",
                    w[0],
                    w[1] - w[0]
                )));
            }
        }
        if let Some(&last) = self.downbeat_indices.last() {
            if self.count() - 1 - last > BEATS_PER_BAR {
                return Err(Error::UnsupportedMeter(format!(
                    "{} beats after the final downbeat",
                    self.count() - 1 - last
                )));
            }
        }
        Ok(())
    }

    /// Bars between consecutive downbeats, plus a trailing partial bar when
    /// beats follow the last downbeat.
    pub fn bars(&self) -> Vec<Bar> {
        let mut bars: Vec<Bar> = self
            .downbeat_indices
            .windows(2)
            .enumerate()
            .map(|(index, w)| Bar { index, start_beat: w[0], end_beat: w[1] })
            .collect();
        if let Some(&last) = self.downbeat_indices.last() {
            let end = self.count() - 1;
            if end > last {
                bars.push(Bar { index: bars.len(), start_beat: last, end_beat: end });
            }
        }
        bars
    }

    /// Duration of beat `i`, i.e. the gap to beat `i + 1`. The final beat
    /// reuses the preceding interval; a single-beat grid has period 0.5 s.
    fn beat_period(&self, i: usize) -> f64 {
        let n = self.count();
        if n < 2 {
            0.5
        } else if i + 1 < n {
            self.beat_times[i + 1] - self.beat_times[i]
        } else {
            self.beat_times[n - 1] - self.beat_times[n - 2]
        }
    }

    /// Time of a fractional beat index; extrapolates linearly past either end.
    pub fn time_at_beat(&self, beat: f64) -> f64 {
        let n = self.count();
        if beat <= 0.0 {
            return self.beat_times[0] + beat * self.beat_period(0);
        }
        let i = beat.floor() as usize;
        if i >= n - 1 {
            let last = n - 1;
            return self.beat_times[last] + (beat - last as f64) * self.beat_period(last);
        }
        let frac = beat - i as f64;
        self.beat_times[i] + frac * (self.beat_times[i + 1] - self.beat_times[i])
    }

    /// Fractional beat index of time `t`; extrapolates linearly past either end.
    pub fn beat_at_time(&self, t: f64) -> f64 {
        let n = self.count();
        if t <= self.beat_times[0] {
            return (t - self.beat_times[0]) / self.beat_period(0);
        }
        if t >= self.beat_times[n - 1] {
            return (n - 1) as f64 + (t - self.beat_times[n - 1]) / self.beat_period(n - 1);
        }
        // first index with beat_times[idx] > t
        let idx = self.beat_times.partition_point(|&b| b <= t);
        let i = idx - 1;
        i as f64 + (t - self.beat_times[i]) / (self.beat_times[i + 1] - self.beat_times[i])
    }

    /// Time of a bar's first beat. Bars past the annotated grid continue at
    /// four beats per bar.
    pub fn bar_start_beat(&self, bar: usize) -> usize {
        match self.downbeat_indices.get(bar) {
            Some(&b) => b,
            None => {
                let last_idx = self.downbeat_indices.len().saturating_sub(1);
                let last = self.downbeat_indices.last().copied().unwrap_or(0);
                last + BEATS_PER_BAR * (bar - last_idx)
            }
        }
    }

    /// Time of subdivision `position` within `bar`.
    pub fn time_at(&self, bar: usize, position: usize, subdivisions: usize) -> f64 {
        let beat = self.bar_start_beat(bar) as f64 + position as f64 / subdivisions as f64;
        self.time_at_beat(beat)
    }

    /// Nearest subdivision index (counted from beat 0), ties to the earlier
    /// one. No span check.
    pub fn nearest_subdivision(&self, t: f64, subdivisions: usize) -> i64 {
        let f = self.beat_at_time(t) * subdivisions as f64;
        let lo = f.floor();
        if f - lo > 0.5 {
            lo as i64 + 1
        } else {
            lo as i64
        }
    }

    /// Snaps `t` to its nearest subdivision. Fails when `t` lies outside
    /// `[first beat, last beat]` or before the first downbeat.
    pub fn quantize_time(&self, t: f64, subdivisions: usize) -> Result<GridPosition> {
        if subdivisions == 0 {
            return Err(Error::invalid("subdivisions must be positive"));
        }
        if !(t >= self.first_time() && t <= self.last_time()) {
            return Err(Error::OutsideGrid { time: t, start: self.first_time(), end: self.last_time() });
        }
        let g = self.nearest_subdivision(t, subdivisions).max(0) as usize;
        self.locate(g, subdivisions).ok_or(Error::OutsideGrid {
            time: t,
            start: self.first_time(),
            end: self.last_time(),
        })
    }

    /// Like [`quantize_time`](Self::quantize_time) but clamps `t` into the
    /// grid span first. The flag reports whether clamping happened.
    pub fn quantize_clamped(&self, t: f64, subdivisions: usize) -> Result<(GridPosition, bool)> {
        let clamped = t.clamp(self.first_time(), self.last_time());
        let pos = self.quantize_time(clamped, subdivisions)?;
        Ok((pos, clamped != t))
    }

    /// Maps a global subdivision index to its bar.
    pub fn locate(&self, subdivision: usize, subdivisions: usize) -> Option<GridPosition> {
        let beat = subdivision / subdivisions;
        let k = self.downbeat_indices.partition_point(|&d| d <= beat);
        if k == 0 {
            return None;
        }
        let bar = k - 1;
        let start = self.downbeat_indices[bar] * subdivisions;
        Some(GridPosition { bar, position: subdivision - start, subdivision })
    }

    /// Median inter-beat interval converted to beats per minute.
    pub fn estimate_bpm(&self) -> Option<f64> {
        let mut ibis: Vec<f64> = self.beat_times.windows(2).map(|w| w[1] - w[0]).collect();
        if ibis.is_empty() {
            return None;
        }
        ibis.sort_by(f64::total_cmp);
        let m = ibis.len();
        let median = if m % 2 == 1 { ibis[m / 2] } else { 0.5 * (ibis[m / 2 - 1] + ibis[m / 2]) };
        Some(60.0 / median)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(bpm: f64, length: f64) -> BeatGrid {
        BeatGrid::from_tempo(&[TempoEvent { time: 0.0, bpm }], length, 4).unwrap()
    }

    #[test]
    fn constant_tempo_grids() {
        let g = constant(120.0, 2.0);
        assert_eq!(g.beat_times(), &[0.0, 0.5, 1.0, 1.5]);
        assert_eq!(g.downbeat_indices(), &[0]);
        assert_eq!(constant(60.0, 4.0).beat_times(), &[0.0, 1.0, 2.0, 3.0]);
    }

    /// Independent oracle: step a fine clock and count when the integrated
    /// beat phase crosses an integer.
    fn integrate_oracle(events: &[(f64, f64)], length: f64) -> Vec<f64> {
        let dt = 1e-5;
        let mut out = vec![0.0];
        let mut phase = 0.0;
        let steps = (length / dt).round() as usize;
        for n in 0..steps {
            let t = n as f64 * dt;
            let bpm = events.iter().rev().find(|e| e.0 <= t).map_or(events[0].1, |e| e.1);
            let next = phase + bpm / 60.0 * dt;
            if next.floor() > phase.floor() {
                let tb = t + (next.floor() - phase) / (bpm / 60.0);
                if tb < length - 1e-6 {
                    out.push(tb);
                }
            }
            phase = next;
        }
        out
    }

    #[test]
    fn piecewise_tempo_matches_integration_oracle() {
        let events = [(0.0, 120.0), (1.0, 60.0)];
        let oracle = integrate_oracle(&events, 3.0);
        let tempo: Vec<TempoEvent> = events.iter().map(|&(time, bpm)| TempoEvent { time, bpm }).collect();
        let g = BeatGrid::from_tempo(&tempo, 3.0, 4).unwrap();
        assert_eq!(g.count(), oracle.len());
        for (a, b) in g.beat_times().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert_eq!(g.beat_times(), &[0.0, 0.5, 1.0, 2.0]);
    }

    #[test]
    fn tempo_change_mid_beat() {
        let tempo = [TempoEvent { time: 0.0, bpm: 120.0 }, TempoEvent { time: 0.75, bpm: 60.0 }];
        let g = BeatGrid::from_tempo(&tempo, 3.0, 4).unwrap();
        let oracle = integrate_oracle(&[(0.0, 120.0), (0.75, 60.0)], 3.0);
        assert_eq!(g.count(), oracle.len());
        // half a beat remains at 0.75 s; at 60 BPM that takes 0.5 s
        assert!((g.beat_times()[2] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn constant_tempo_is_arithmetic() {
        for bpm in [47.0, 90.0, 133.3, 200.0] {
            let g = constant(bpm, 30.0);
            for (i, t) in g.beat_times().iter().enumerate() {
                assert!((t - i as f64 * 60.0 / bpm).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn grid_construction_errors() {
        assert!(BeatGrid::from_tempo(&[], 2.0, 4).is_err());
        let t = [TempoEvent { time: 0.0, bpm: 120.0 }];
        assert!(BeatGrid::from_tempo(&t, 0.0, 4).is_err());
        assert!(matches!(BeatGrid::from_tempo(&t, 2.0, 3), Err(Error::UnsupportedMeter(_))));
        assert!(BeatGrid::new(vec![0.0, 0.0], vec![0]).is_err());
        assert!(BeatGrid::new(vec![0.0, 1.0], vec![2]).is_err());
        assert!(BeatGrid::new(vec![0.0, 1.0, 2.0], vec![1, 0]).is_err());
    }

    #[test]
    fn quantize_examples() {
        let g = BeatGrid::new(vec![0.0, 0.5, 1.0], vec![0]).unwrap();
        let p = g.quantize_time(0.5, 4).unwrap();
        assert_eq!((p.bar, p.position), (0, 4));
        assert_eq!(g.quantize_time(0.13, 4).unwrap().position, 1);
        assert_eq!(g.quantize_time(0.0625, 4).unwrap().position, 0);
        assert!(matches!(g.quantize_time(1.2, 4), Err(Error::OutsideGrid { .. })));
        assert!(matches!(g.quantize_time(-0.1, 4), Err(Error::OutsideGrid { .. })));
        let (p, clamped) = g.quantize_clamped(1.2, 4).unwrap();
        assert!(clamped);
        assert_eq!(p.position, 8);
    }

    #[test]
    fn quantize_matches_nearest_grid_oracle() {
        let g = BeatGrid::new(vec![0.0, 0.5, 1.2, 1.5, 2.5, 2.9], vec![0, 4]).unwrap();
        // all subdivision points, brute force
        let mut points = Vec::new();
        for b in 0..g.count() - 1 {
            for s in 0..4 {
                points.push(g.time_at_beat(b as f64 + s as f64 / 4.0));
            }
        }
        points.push(g.last_time());
        let mut t = 0.0;
        while t <= g.last_time() {
            let best = points.iter().enumerate().min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs())).unwrap().0;
            let q = g.quantize_time(t, 4).unwrap();
            assert_eq!(q.subdivision, best, "t = {t}");
            t += 0.0137;
        }
    }

    #[test]
    fn quantize_is_idempotent_on_grid_points() {
        let g = BeatGrid::new(vec![0.0, 0.4, 0.9, 1.3, 1.8, 2.2, 2.7], vec![0, 4]).unwrap();
        for s in 0..=24 {
            let t = g.time_at_beat(s as f64 / 4.0);
            let q = g.quantize_time(t, 4).unwrap();
            assert_eq!(q.subdivision, s);
            let back = g.time_at(q.bar, q.position, 4);
            assert_eq!(g.quantize_time(back, 4).unwrap(), q);
        }
    }

    #[test]
    fn bars_and_meter() {
        let g = constant(120.0, 4.25);
        assert_eq!(g.count(), 9);
        assert_eq!(
            g.bars(),
            vec![Bar { index: 0, start_beat: 0, end_beat: 4 }, Bar { index: 1, start_beat: 4, end_beat: 8 },]
        );
        g.check_four_four().unwrap();
        let odd = BeatGrid::new(vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![0, 3]).unwrap();
        assert!(matches!(odd.check_four_four(), Err(Error::UnsupportedMeter(_))));
        // trailing partial bar
        let g = constant(120.0, 2.0);
        assert_eq!(g.bars(), vec![Bar { index: 0, start_beat: 0, end_beat: 3 }]);
    }

    #[test]
    fn bpm_estimate() {
        let g = BeatGrid::new(vec![0.0, 0.5, 1.0, 1.5], vec![0]).unwrap();
        assert!((g.estimate_bpm().unwrap() - 120.0).abs() < 1e-12);
    }

    #[test]
    fn beat_time_round_trip() {
        let g = BeatGrid::new(vec![0.3, 0.8, 1.1, 1.9], vec![0]).unwrap();
        for b in [-1.0, -0.25, 0.0, 0.5, 1.75, 3.0, 4.5] {
            let t = g.time_at_beat(b);
            assert!((g.beat_at_time(t) - b).abs() < 1e-12);
        }
    }
}
