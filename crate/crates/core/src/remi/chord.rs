//! Chord symbols and template-based chord extraction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BeatGrid;
use crate::performance::PianoPerformance;

const ROOT_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChordQuality {
    Maj,
    Min,
    Dim,
    Aug,
    Dom7,
    Maj7,
    Min7,
    Min7b5,
    Sus2,
    Sus4,
    Power,
}

impl ChordQuality {
    pub const ALL: [ChordQuality; 11] = [
        ChordQuality::Maj,
        ChordQuality::Min,
        ChordQuality::Dim,
        ChordQuality::Aug,
        ChordQuality::Dom7,
        ChordQuality::Maj7,
        ChordQuality::Min7,
        ChordQuality::Min7b5,
        ChordQuality::Sus2,
        ChordQuality::Sus4,
        ChordQuality::Power,
    ];

    pub fn intervals(self) -> &'static [u8] {
        match self {
            ChordQuality::Maj => &[0, 4, 7],
            ChordQuality::Min => &[0, 3, 7],
            ChordQuality::Dim => &[0, 3, 6],
            ChordQuality::Aug => &[0, 4, 8],
            ChordQuality::Dom7 => &[0, 4, 7, 10],
            ChordQuality::Maj7 => &[0, 4, 7, 11],
            ChordQuality::Min7 => &[0, 3, 7, 10],
            ChordQuality::Min7b5 => &[0, 3, 6, 10],
            ChordQuality::Sus2 => &[0, 2, 7],
            ChordQuality::Sus4 => &[0, 5, 7],
            ChordQuality::Power => &[0, 7],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChordQuality::Maj => "maj",
            ChordQuality::Min => "min",
            ChordQuality::Dim => "dim",
            ChordQuality::Aug => "aug",
            ChordQuality::Dom7 => "7",
            ChordQuality::Maj7 => "maj7",
            ChordQuality::Min7 => "min7",
            ChordQuality::Min7b5 => "min7b5",
            ChordQuality::Sus2 => "sus2",
            ChordQuality::Sus4 => "sus4",
            ChordQuality::Power => "5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chord {
    pub root: u8,
    pub quality: ChordQuality,
}

impl Chord {
    /// Binary pitch-class template.
    pub fn template(&self) -> [f64; 12] {
        let mut t = [0.0; 12];
        for &i in self.quality.intervals() {
            t[((self.root + i) % 12) as usize] = 1.0;
        }
        t
    }

    /// Every chord in vocabulary order: root-major, then quality.
    pub fn all() -> impl Iterator<Item = Chord> {
        (0..12u8).flat_map(|root| ChordQuality::ALL.into_iter().map(move |quality| Chord { root, quality }))
    }
}

impl fmt::Display for Chord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", ROOT_NAMES[self.root as usize], self.quality.name())
    }
}

fn parse_root(s: &str) -> Option<u8> {
    let mut chars = s.chars();
    let base = match chars.next()? {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return None,
    };
    let mut pc: i32 = base;
    for c in chars {
        match c {
            '#' => pc += 1,
            'b' => pc -= 1,
            _ => return None,
        }
    }
    Some(pc.rem_euclid(12) as u8)
}

/// A chord label: `Some(chord)` or the no-chord symbol `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChordLabel(pub Option<Chord>);

impl FromStr for ChordLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "N" {
            return Ok(ChordLabel(None));
        }
        let unknown = || Error::UnknownChord(s.to_string());
        let (root, quality) = s.split_once(':').ok_or_else(unknown)?;
        let root = parse_root(root).ok_or_else(unknown)?;
        let quality = match quality {
            "maj" | "" => ChordQuality::Maj,
            "min" | "m" => ChordQuality::Min,
            "dim" => ChordQuality::Dim,
            "aug" => ChordQuality::Aug,
            "7" | "dom7" => ChordQuality::Dom7,
            "maj7" => ChordQuality::Maj7,
            "min7" | "m7" => ChordQuality::Min7,
            "min7b5" | "hdim7" => ChordQuality::Min7b5,
            "sus2" => ChordQuality::Sus2,
            "sus4" => ChordQuality::Sus4,
            "5" | "power" => ChordQuality::Power,
            _ => return Err(unknown()),
        };
        Ok(ChordLabel(Some(Chord { root, quality })))
    }
}

impl fmt::Display for ChordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(c) => c.fmt(f),
            None => f.write_str("N"),
        }
    }
}

/// A chord change at a time in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChordChange {
    pub time: f64,
    pub chord: Option<Chord>,
}

#[derive(Deserialize, Serialize)]
struct ChordRecord {
    time: f64,
    label: String,
}

/// Parses a JSON list of `{"time": seconds, "label": "C:maj"}` records.
pub fn parse_chord_track(json: &str) -> Result<Vec<ChordChange>> {
    let records: Vec<ChordRecord> = serde_json::from_str(json)?;
    records
        .into_iter()
        .map(|r| {
            let label: ChordLabel = r.label.parse()?;
            Ok(ChordChange { time: r.time, chord: label.0 })
        })
        .collect()
}

/// Best-matching chord for a pitch-class profile by cosine similarity against
/// the binary templates. An all-zero profile yields no chord; ties keep the
/// earlier chord in vocabulary order.
pub fn match_chord(profile: &[f64; 12]) -> Option<Chord> {
    let norm = profile.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return None;
    }
    let mut best: Option<(Chord, f64)> = None;
    for chord in Chord::all() {
        let t = chord.template();
        let tn = t.iter().sum::<f64>().sqrt();
        let score = profile.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / (norm * tn);
        if best.is_none_or(|(_, s)| score > s + 1e-12) {
            best = Some((chord, score));
        }
    }
    best.map(|b| b.0)
}

/// Per-bar chord estimate from duration-weighted pitch-class profiles. Only
/// changes are reported, each at its bar's first beat.
pub fn extract_chords(perf: &PianoPerformance, grid: &BeatGrid) -> Vec<ChordChange> {
    let mut out = Vec::new();
    let mut current: Option<Chord> = None;
    for bar in grid.bars() {
        let start = grid.beat_times()[bar.start_beat];
        let end = grid.beat_times()[bar.end_beat];
        let mut profile = [0.0; 12];
        for n in perf.notes() {
            let overlap = n.offset().min(end) - n.onset.max(start);
            if overlap > 0.0 {
                profile[(n.pitch % 12) as usize] += overlap;
            }
        }
        let chord = match_chord(&profile);
        if chord != current {
            out.push(ChordChange { time: start, chord });
            current = chord;
        }
    }
    out
}
