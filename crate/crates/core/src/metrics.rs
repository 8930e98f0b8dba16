//! Objective metrics: skyline melody, melody chroma accuracy, 4-bar pitch-class
//! entropy and next-bar grooving similarity.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BeatGrid, POSITIONS_PER_BAR, SUBDIVISIONS_PER_BEAT};
use crate::performance::PianoPerformance;
use crate::remi::GridNote;

pub const CONTOUR_FRAME_RATE: f64 = 100.0;

/// Per-frame melody pitch; `None` marks an unvoiced frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelodyContour {
    pub frame_rate: f64,
    pub pitches: Vec<Option<f64>>,
}

impl MelodyContour {
    pub fn new(frame_rate: f64, pitches: Vec<Option<f64>>) -> Result<Self> {
        if !(frame_rate > 0.0) {
            return Err(Error::invalid("contour frame rate must be positive"));
        }
        if pitches.iter().flatten().any(|p| !(0.0..=127.0).contains(p)) {
            return Err(Error::invalid("voiced contour pitches must lie in 0..=127"));
        }
        Ok(MelodyContour { frame_rate, pitches })
    }

    pub fn voiced(&self) -> usize {
        self.pitches.iter().filter(|p| p.is_some()).count()
    }

    pub fn transpose(&self, semitones: f64) -> Self {
        MelodyContour {
            frame_rate: self.frame_rate,
            pitches: self.pitches.iter().map(|p| p.map(|v| v + semitones)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: MelodyContour = serde_json::from_str(&text)?;
        MelodyContour::new(c.frame_rate, c.pitches)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("contour serializes")
    }
}

/// Highest sounding pitch at each frame centre.
pub fn skyline(perf: &PianoPerformance, frame_rate: f64) -> Result<MelodyContour> {
    if !(frame_rate > 0.0) {
        return Err(Error::invalid("frame rate must be positive"));
    }
    let frames = (perf.length() * frame_rate - 1e-9).ceil().max(0.0) as usize;
    let mut pitches: Vec<Option<f64>> = vec![None; frames];
    for n in perf.notes() {
        // frames whose centre (f + 0.5) / fr lies in [onset, offset)
        let lo = ((n.onset * frame_rate - 0.5).ceil().max(0.0)) as usize;
        let hi = (((n.offset()) * frame_rate - 0.5).ceil().max(0.0) as usize).min(frames);
        for p in pitches.iter_mut().take(hi).skip(lo) {
            let v = n.pitch as f64;
            if p.is_none_or(|cur| v > cur) {
                *p = Some(v);
            }
        }
    }
    MelodyContour::new(frame_rate, pitches)
}

/// Pitch difference folded into (−6, 6] semitones.
fn chroma_distance(a: f64, b: f64) -> f64 {
    let r = (b - a).rem_euclid(12.0);
    if r > 6.0 {
        r - 12.0
    } else {
        r
    }
}

/// Raw chroma accuracy over the common length: the fraction of
/// reference-voiced frames whose estimate is voiced and within 50 cents after
/// octave folding.
pub fn mca(reference: &MelodyContour, estimate: &MelodyContour) -> Result<f64> {
    if reference.frame_rate != estimate.frame_rate {
        return Err(Error::invalid(format!("frame rates differ: {} vs {}", reference.frame_rate, estimate.frame_rate)));
    }
    let n = reference.pitches.len().min(estimate.pitches.len());
    let mut voiced = 0usize;
    let mut correct = 0usize;
    for (r, e) in reference.pitches[..n].iter().zip(&estimate.pitches[..n]) {
        let Some(r) = r else { continue };
        voiced += 1;
        if let Some(e) = e {
            if chroma_distance(*r, *e).abs() <= 0.5 {
                correct += 1;
            }
        }
    }
    if voiced == 0 {
        return Err(Error::invalid("reference has no voiced frames in the compared span"));
    }
    Ok(correct as f64 / voiced as f64)
}

/// Entropy in bits of a pitch-class histogram; 0 for an empty one.
pub fn pitch_class_entropy(counts: &[usize; 12]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

/// Mean entropy over sliding windows of four bars (stride one), skipping
/// windows without notes. `bars[k]` holds the pitches of notes starting in bar `k`.
pub fn h4_from_bars(bars: &[Vec<u8>]) -> Result<f64> {
    if bars.len() < 4 {
        return Err(Error::invalid(format!("H4 needs at least 4 bars, got {}", bars.len())));
    }
    let mut sum = 0.0;
    let mut windows = 0usize;
    for w in bars.windows(4) {
        let mut counts = [0usize; 12];
        for &p in w.iter().flatten() {
            counts[(p % 12) as usize] += 1;
        }
        if counts.iter().all(|&c| c == 0) {
            continue;
        }
        sum += pitch_class_entropy(&counts);
        windows += 1;
    }
    if windows == 0 {
        return Err(Error::invalid("no 4-bar window contains notes"));
    }
    Ok(sum / windows as f64)
}

fn bar_of_note(grid: &BeatGrid, onset: f64) -> Result<usize> {
    let (pos, _) = grid.quantize_clamped(onset, SUBDIVISIONS_PER_BEAT)?;
    Ok(pos.bar)
}

/// Pitches per bar, by quantized onset.
pub fn pitches_per_bar(perf: &PianoPerformance, grid: &BeatGrid) -> Result<Vec<Vec<u8>>> {
    let mut bars = vec![Vec::new(); grid.bars().len()];
    for n in perf.notes() {
        let b = bar_of_note(grid, n.onset)?;
        if b >= bars.len() {
            bars.resize(b + 1, Vec::new());
        }
        bars[b].push(n.pitch);
    }
    Ok(bars)
}

pub fn pitch_class_entropy_4(perf: &PianoPerformance, grid: &BeatGrid) -> Result<f64> {
    h4_from_bars(&pitches_per_bar(perf, grid)?)
}

pub type GrooveVector = [bool; POSITIONS_PER_BAR];

/// `1 − Hamming(a, b) / 16`.
pub fn grooving_similarity(a: &GrooveVector, b: &GrooveVector) -> f64 {
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    1.0 - diff as f64 / POSITIONS_PER_BAR as f64
}

/// Mean similarity of each bar's groove to the next bar's.
pub fn gs_from_grooves(grooves: &[GrooveVector]) -> Result<f64> {
    if grooves.len() < 2 {
        return Err(Error::invalid(format!("GS needs at least 2 bars, got {}", grooves.len())));
    }
    let sum: f64 = grooves.windows(2).map(|w| grooving_similarity(&w[0], &w[1])).sum();
    Ok(sum / (grooves.len() - 1) as f64)
}

/// Onset indicators per bar from quantized notes.
pub fn grooves_from_notes(notes: &[GridNote], bars: usize) -> Vec<GrooveVector> {
    let mut out = vec![[false; POSITIONS_PER_BAR]; bars];
    for n in notes {
        if n.bar < bars && n.position < POSITIONS_PER_BAR {
            out[n.bar][n.position] = true;
        }
    }
    out
}

pub fn grooves(perf: &PianoPerformance, grid: &BeatGrid) -> Result<Vec<GrooveVector>> {
    let mut out = vec![[false; POSITIONS_PER_BAR]; grid.bars().len()];
    for n in perf.notes() {
        let (pos, _) = grid.quantize_clamped(n.onset, SUBDIVISIONS_PER_BEAT)?;
        if pos.bar >= out.len() {
            out.resize(pos.bar + 1, [false; POSITIONS_PER_BAR]);
        }
        if pos.position < POSITIONS_PER_BAR {
            out[pos.bar][pos.position] = true;
        }
    }
    Ok(out)
}

pub fn grooving_similarity_next(perf: &PianoPerformance, grid: &BeatGrid) -> Result<f64> {
    gs_from_grooves(&grooves(perf, grid)?)
}
