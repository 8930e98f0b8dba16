//! Seeded synthetic fixtures: quantized performances, structured toy pieces
//! and song/piano pairs with known warps (including flat-warp bars).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{remap_notes, TimeMap};
use crate::beat_align::{build_weak_pair, WeakAlignedPair};
use crate::dataset::PianoRecord;
use crate::error::{Error, Result};
use crate::features::{chroma_from_midi, FeatureMatrix, FRAME_RATE};
use crate::grid::{BeatGrid, BEATS_PER_BAR, SUBDIVISIONS_PER_BEAT};
use crate::performance::{NoteEvent, PianoPerformance, TempoEvent};
use crate::remi::{encode, Vocabulary};

pub const BEAT_PERIOD: f64 = 0.5;

/// A 4/4 grid of `bars` bars with constant beat period, including the
/// closing downbeat.
pub fn constant_grid(bars: usize, beat_period: f64) -> BeatGrid {
    let n = bars * BEATS_PER_BAR + 1;
    let beats = (0..n).map(|i| i as f64 * beat_period).collect();
    BeatGrid::new(beats, (0..n).step_by(BEATS_PER_BAR).collect()).expect("valid grid")
}

fn sub_time(grid: &BeatGrid, sub: usize) -> f64 {
    grid.time_at_beat(sub as f64 / SUBDIVISIONS_PER_BEAT as f64)
}

/// Random notes whose onsets and offsets lie on the 16th-note grid and whose
/// velocities are bin centres, at a constant 120 BPM.
pub fn random_quantized_performance<R: Rng>(
    rng: &mut R,
    bars: usize,
    max_notes: usize,
    vocab: &Vocabulary,
) -> (PianoPerformance, BeatGrid) {
    let grid = constant_grid(bars, BEAT_PERIOD);
    let subs = bars * 16;
    let n = rng.random_range(0..=max_notes);
    let cfg = vocab.config();
    let mut notes = Vec::with_capacity(n);
    for _ in 0..n {
        let on = rng.random_range(0..subs);
        let dur = rng.random_range(1..=cfg.max_duration);
        let pitch = rng.random_range(cfg.min_pitch..=cfg.max_pitch);
        let bin = rng.random_range(0..cfg.velocity_bins as u8);
        let onset = sub_time(&grid, on);
        let offset = sub_time(&grid, on + dur);
        notes.push(NoteEvent::new(pitch, onset, offset - onset, vocab.velocity_center(bin)).expect("valid note"));
    }
    let tempo = vec![TempoEvent { time: 0.0, bpm: 60.0 / BEAT_PERIOD }];
    let perf = PianoPerformance::new(notes, tempo, Some(grid.last_time())).expect("valid performance");
    (perf, grid)
}

const PROGRESSIONS: [[u8; 4]; 4] = [[0, 7, 9, 5], [0, 5, 7, 0], [9, 5, 0, 7], [2, 7, 0, 0]];

/// A small structured piece: a bass note and a broken chord per bar over a
/// seeded progression in a seeded key, plus a melody note per beat.
pub fn synthetic_piece(seed: u64, bars: usize) -> (PianoPerformance, BeatGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = constant_grid(bars, BEAT_PERIOD);
    let key = rng.random_range(0..12u8);
    let prog = PROGRESSIONS[rng.random_range(0..PROGRESSIONS.len())];
    let mut notes = Vec::new();
    for bar in 0..bars {
        let root = (key + prog[bar % 4]) % 12;
        let minor = matches!(prog[bar % 4], 9 | 2 | 4);
        let third = if minor { 3 } else { 4 };
        let base = bar * 16;
        let mut push = |sub: usize, dur: usize, pitch: u8, vel: u8| {
            let on = sub_time(&grid, base + sub);
            let off = sub_time(&grid, base + sub + dur);
            notes.push(NoteEvent::new(pitch, on, off - on, vel).expect("valid note"));
        };
        push(0, 8, 36 + root, 80);
        push(8, 8, 43 + root % 12, 72);
        for (i, iv) in [0u8, third, 7].into_iter().enumerate() {
            push(4 * (i + 1), 4, 55 + root + iv, 64);
        }
        for beat in 0..4 {
            let step = [0u8, third, 7, 12][rng.random_range(0..4)];
            push(beat * 4, 4, 67 + root + step, 96);
        }
    }
    let tempo = vec![TempoEvent { time: 0.0, bpm: 60.0 / BEAT_PERIOD }];
    let perf = PianoPerformance::new(notes, tempo, Some(grid.last_time())).expect("valid performance");
    (perf, grid)
}

/// Piano-only training record with features rendered from the notes.
pub fn piano_record(
    id: impl Into<String>,
    perf: &PianoPerformance,
    grid: &BeatGrid,
    vocab: &Vocabulary,
) -> Result<PianoRecord> {
    let tokens = encode(perf, grid, None, vocab)?;
    Ok(PianoRecord { id: id.into(), tokens, grid: grid.clone(), features: chroma_from_midi(perf, FRAME_RATE)? })
}

/// A song/piano pair built from a known warp.
#[derive(Debug, Clone)]
pub struct WarpedPair {
    pub piano: PianoPerformance,
    pub piano_grid: BeatGrid,
    pub song: PianoPerformance,
    pub song_grid: BeatGrid,
    pub song_features: FeatureMatrix,
    pub map: TimeMap,
    pub flat_bars: Vec<usize>,
}

impl WarpedPair {
    pub fn weak_pair(&self, vocab: &Vocabulary) -> Result<WeakAlignedPair> {
        build_weak_pair(
            &self.piano,
            None,
            self.song_features.clone(),
            &self.map,
            &self.piano_grid,
            &self.song_grid,
            vocab,
        )
    }
}

/// Song time advances `slope` times faster than piano time, except across the
/// bars in `flat_bars`, which the map squashes onto a single song instant.
/// The song is the piano remapped onto the song grid and rendered to chroma.
pub fn warped_pair(
    piano: &PianoPerformance,
    piano_grid: &BeatGrid,
    slope: f64,
    flat_bars: &[usize],
) -> Result<WarpedPair> {
    if !(slope > 0.0) {
        return Err(Error::invalid("slope must be positive"));
    }
    let bars = piano_grid.bars();
    let mut knots = vec![(piano_grid.first_time(), 0.0)];
    let mut song_beats = 0usize;
    for bar in &bars {
        let (a, b) = (piano_grid.beat_times()[bar.start_beat], piano_grid.beat_times()[bar.end_beat]);
        let s = knots.last().unwrap().1;
        if flat_bars.contains(&bar.index) {
            knots.push((b, s));
        } else {
            knots.push((b, s + (b - a) * slope));
            song_beats += bar.beats();
        }
    }
    if song_beats == 0 {
        return Err(Error::invalid("every bar is flat; the song would have no beats"));
    }
    let period = piano_grid.estimate_bpm().map(|b| 60.0 / b).unwrap_or(BEAT_PERIOD) * slope;
    let n = song_beats + 1;
    let song_grid =
        BeatGrid::new((0..n).map(|j| j as f64 * period).collect(), (0..n).step_by(BEATS_PER_BAR).collect())?;
    let map = TimeMap::new(knots)?;
    let song = remap_notes(piano, &map, &song_grid)?;
    let song_features = chroma_from_midi(&song, FRAME_RATE)?;
    Ok(WarpedPair {
        piano: piano.clone(),
        piano_grid: piano_grid.clone(),
        song,
        song_grid,
        song_features,
        map,
        flat_bars: flat_bars.to_vec(),
    })
}

/// Additive sine rendering (three harmonics, linear decay) of a performance,
/// peak-normalized. Enough for chroma analysis; not meant to sound good.
pub fn render_audio(perf: &PianoPerformance, sample_rate: u32) -> Vec<f32> {
    let sr = sample_rate as f64;
    let n = (perf.length() * sr).ceil() as usize + 1;
    let mut out = vec![0.0f64; n];
    for note in perf.notes() {
        let f0 = 440.0 * 2f64.powf((note.pitch as f64 - 69.0) / 12.0);
        let amp = note.velocity as f64 / 127.0;
        let a = (note.onset * sr) as usize;
        let b = ((note.offset() * sr) as usize).min(n);
        let len = (b - a.min(b)).max(1) as f64;
        for (k, x) in out[a.min(b)..b].iter_mut().enumerate() {
            let t = k as f64 / sr;
            let env = amp * (1.0 - 0.7 * k as f64 / len);
            for (h, w) in [(1.0, 1.0), (2.0, 0.4), (3.0, 0.2)] {
                if f0 * h < sr / 2.0 {
                    *x += env * w * (2.0 * std::f64::consts::PI * f0 * h * t).sin();
                }
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = if peak > 0.0 { 0.9 / peak } else { 0.0 };
    out.into_iter().map(|x| (x * scale) as f32).collect()
}

/// A random non-decreasing piecewise-linear map over `[0, length]`.
pub fn random_monotone_map<R: Rng>(rng: &mut R, length: f64, knots: usize, max_slope: f64) -> TimeMap {
    let mut pts = vec![(0.0, rng.random_range(0.0..1.0))];
    let step = length / knots.max(1) as f64;
    for i in 1..=knots.max(1) {
        let (_, y) = pts[i - 1];
        // occasional flat segments
        let slope = if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.2..max_slope) };
        pts.push((i as f64 * step, y + slope * step));
    }
    TimeMap::new(pts).expect("monotone knots")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beat_align::find_invalid_bars;
    use crate::remi::VocabConfig;
    use std::collections::BTreeSet;

    #[test]
    fn flat_bars_are_exactly_the_invalid_ones() {
        let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
        let (piano, grid) = synthetic_piece(3, 8);
        let pair = warped_pair(&piano, &grid, 1.1, &[1, 4, 5]).unwrap();
        let weak = pair.weak_pair(&vocab).unwrap();
        let invalid = find_invalid_bars(&weak.alignment, &weak.bars).unwrap();
        assert_eq!(invalid, BTreeSet::from([1, 4, 5]));
        assert_eq!(weak.valid_bars.len(), 5);
    }

    #[test]
    fn rendered_audio_has_the_right_chroma() {
        let perf = PianoPerformance::new(vec![NoteEvent::new(69, 0.0, 1.0, 100).unwrap()], vec![], Some(1.0)).unwrap();
        let pcm = render_audio(&perf, 22050);
        assert_eq!(pcm.len(), 22051);
        let chroma = crate::features::chromagram(&pcm, 22050).unwrap();
        let mid = chroma.frame(chroma.count() / 2);
        let best = (0..12).max_by(|&a, &b| mid[a].total_cmp(&mid[b])).unwrap();
        assert_eq!(best, 9);
    }

    #[test]
    fn pieces_are_deterministic_and_distinct() {
        let (a, _) = synthetic_piece(1, 4);
        let (b, _) = synthetic_piece(1, 4);
        let (c, _) = synthetic_piece(2, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.notes().len(), 4 * 9);
    }
}
