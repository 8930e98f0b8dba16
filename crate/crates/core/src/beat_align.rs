//! Beat-level weak alignment between a piano cover and its song.
//!
//! Each piano beat is mapped through the piano-to-song time map and assigned
//! the index of the nearest song beat. A bar whose first and last beats land
//! on the same song beat has no usable song segment and is marked invalid.
//! Piano notes are never re-timed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::alignment::TimeMap;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::grid::{Bar, BeatGrid};
use crate::performance::PianoPerformance;
use crate::remi::{encode, ChordChange, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatAlignment {
    /// `mapping[i]` is the song beat for piano beat `i` (0-based).
    pub mapping: Vec<usize>,
    pub piano_grid: BeatGrid,
    pub song_grid: BeatGrid,
}

impl BeatAlignment {
    pub fn is_monotone(&self) -> bool {
        self.mapping.windows(2).all(|w| w[0] <= w[1])
    }

    /// Song beats `[F(start), F(end))` covered by a piano bar.
    pub fn song_span(&self, bar: &Bar) -> (usize, usize) {
        (self.mapping[bar.start_beat], self.mapping[bar.end_beat])
    }
}

/// Index of the song beat nearest to `t`; ties pick the smaller index.
pub fn nearest_beat(song_beats: &[f64], t: f64) -> usize {
    let idx = song_beats.partition_point(|&s| s < t);
    if idx == 0 {
        return 0;
    }
    if idx == song_beats.len() {
        return idx - 1;
    }
    if (t - song_beats[idx - 1]).abs() <= (song_beats[idx] - t).abs() {
        idx - 1
    } else {
        idx
    }
}

pub fn beat_align(map: &TimeMap, piano_grid: &BeatGrid, song_grid: &BeatGrid) -> Result<BeatAlignment> {
    if piano_grid.count() == 0 || song_grid.count() == 0 {
        return Err(Error::invalid("beat alignment needs non-empty grids"));
    }
    let song = song_grid.beat_times();
    let mapping = piano_grid.beat_times().iter().map(|&q| nearest_beat(song, map.eval(q))).collect();
    Ok(BeatAlignment { mapping, piano_grid: piano_grid.clone(), song_grid: song_grid.clone() })
}

/// Bars whose start and end beats map to the same song beat.
pub fn find_invalid_bars(alignment: &BeatAlignment, bars: &[Bar]) -> Result<BTreeSet<usize>> {
    let mut invalid = BTreeSet::new();
    for bar in bars {
        if bar.end_beat >= alignment.mapping.len() || bar.start_beat >= bar.end_beat {
            return Err(Error::invalid(format!(
                "bar {} spans beats {}..{} but the alignment has {} beats",
                bar.index,
                bar.start_beat,
                bar.end_beat,
                alignment.mapping.len()
            )));
        }
        if alignment.mapping[bar.start_beat] == alignment.mapping[bar.end_beat] {
            invalid.insert(bar.index);
        }
    }
    Ok(invalid)
}

#[derive(Debug, Clone)]
pub struct WeakAlignedPair {
    pub piano: PianoPerformance,
    pub tokens: TokenSequence,
    pub song_features: FeatureMatrix,
    pub alignment: BeatAlignment,
    pub bars: Vec<Bar>,
    pub valid_bars: Vec<Bar>,
}

impl WeakAlignedPair {
    pub fn invalid_bars(&self) -> Vec<usize> {
        let valid: BTreeSet<usize> = self.valid_bars.iter().map(|b| b.index).collect();
        self.bars.iter().map(|b| b.index).filter(|i| !valid.contains(i)).collect()
    }
}

/// Assembles a weakly aligned pair. The piano is tokenized exactly as it
/// would be on its own; only the bar-to-song-segment correspondence is added.
pub fn build_weak_pair(
    piano: &PianoPerformance,
    chords: Option<&[ChordChange]>,
    song_features: FeatureMatrix,
    map: &TimeMap,
    piano_grid: &BeatGrid,
    song_grid: &BeatGrid,
    vocab: &Vocabulary,
) -> Result<WeakAlignedPair> {
    if song_features.is_empty() {
        return Err(Error::invalid("song features are empty"));
    }
    if song_grid.first_time() >= song_features.duration() {
        return Err(Error::invalid(format!(
            "song grid starts at {:.3}s, after the {:.3}s of song features",
            song_grid.first_time(),
            song_features.duration()
        )));
    }
    let tokens = encode(piano, piano_grid, chords, vocab)?;
    let alignment = beat_align(map, piano_grid, song_grid)?;
    let bars = piano_grid.bars();
    if bars.len() != tokens.bar_count() {
        return Err(Error::invalid("token bars do not match the piano grid"));
    }
    let invalid = find_invalid_bars(&alignment, &bars)?;
    // a reversed bar (only possible for a non-monotone alignment) has no song
    // segment either; the pair is kept and flagged in its manifest
    let valid_bars = bars
        .iter()
        .filter(|b| !invalid.contains(&b.index) && alignment.mapping[b.start_beat] < alignment.mapping[b.end_beat])
        .copied()
        .collect();
    Ok(WeakAlignedPair { piano: piano.clone(), tokens, song_features, alignment, bars, valid_bars })
}

/// On-disk description of a weakly aligned pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub id: String,
    pub alignment: Vec<usize>,
    pub valid_bars: Vec<usize>,
    pub invalid_bars: Vec<usize>,
    pub non_monotone: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piano_midi: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub song_features: Option<String>,
}

impl PairManifest {
    pub fn from_pair(id: impl Into<String>, pair: &WeakAlignedPair) -> Self {
        PairManifest {
            id: id.into(),
            alignment: pair.alignment.mapping.clone(),
            valid_bars: pair.valid_bars.iter().map(|b| b.index).collect(),
            invalid_bars: pair.invalid_bars(),
            non_monotone: !pair.alignment.is_monotone(),
            piano_midi: None,
            song_features: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(times: &[f64]) -> BeatGrid {
        BeatGrid::new(times.to_vec(), (0..times.len()).step_by(4).collect()).unwrap()
    }

    fn argmin_oracle(target: f64, song: &[f64]) -> usize {
        let mut best = 0;
        for j in 1..song.len() {
            if (target - song[j]).abs() < (target - song[best]).abs() {
                best = j;
            }
        }
        best
    }

    #[test]
    fn identity_alignment() {
        let g = grid(&[0.0, 0.5, 1.0, 1.5, 2.0]);
        let a = beat_align(&TimeMap::identity(2.0), &g, &g).unwrap();
        assert_eq!(a.mapping, vec![0, 1, 2, 3, 4]);
        assert!(find_invalid_bars(&a, &g.bars()).unwrap().is_empty());
    }

    #[test]
    fn doubled_time() {
        let p = grid(&[0.0, 1.0, 2.0, 3.0]);
        let s = grid(&[0.0, 2.0, 4.0, 6.0]);
        let map = TimeMap::linear(2.0, 3.0).unwrap();
        let a = beat_align(&map, &p, &s).unwrap();
        let oracle: Vec<usize> = p.beat_times().iter().map(|&q| argmin_oracle(2.0 * q, s.beat_times())).collect();
        assert_eq!(a.mapping, oracle);
        assert_eq!(a.mapping, vec![0, 1, 2, 3]);
    }

    #[test]
    fn constant_map_collapses() {
        let p = grid(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let s = grid(&[0.0, 0.7, 1.4, 2.1]);
        let map = TimeMap::new(vec![(0.0, 1.2), (4.0, 1.2)]).unwrap();
        let a = beat_align(&map, &p, &s).unwrap();
        assert!(a.mapping.iter().all(|&j| j == 2));
        assert_eq!(find_invalid_bars(&a, &p.bars()).unwrap(), BTreeSet::from([0]));
    }

    #[test]
    fn ties_pick_smaller_index() {
        assert_eq!(nearest_beat(&[0.0, 1.0, 2.0], 0.5), 0);
        assert_eq!(nearest_beat(&[0.0, 1.0, 2.0], 1.5), 1);
        assert_eq!(nearest_beat(&[0.0, 1.0, 2.0], 9.0), 2);
        assert_eq!(nearest_beat(&[0.0, 1.0, 2.0], -3.0), 0);
    }

    #[test]
    fn flat_warp_bar_is_invalid() {
        // 4 bars of 4 beats at 0.5 s; bar 2 (beats 8..12) squashed onto one song instant
        let piano: Vec<f64> = (0..17).map(|i| i as f64 * 0.5).collect();
        let p = grid(&piano);
        let map = TimeMap::new(vec![(0.0, 0.0), (4.0, 4.0), (6.0, 4.0), (8.0, 6.0)]).unwrap();
        let s = grid(&(0..13).map(|i| i as f64 * 0.5).collect::<Vec<_>>());
        let a = beat_align(&map, &p, &s).unwrap();
        assert_eq!(find_invalid_bars(&a, &p.bars()).unwrap(), BTreeSet::from([2]));
    }

    #[test]
    fn out_of_range_bar() {
        let g = grid(&[0.0, 0.5, 1.0]);
        let a = beat_align(&TimeMap::identity(1.0), &g, &g).unwrap();
        let bar = Bar { index: 0, start_beat: 0, end_beat: 4 };
        assert!(find_invalid_bars(&a, &[bar]).is_err());
    }
}
