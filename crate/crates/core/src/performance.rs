//! Note-level piano performances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_PITCH: u8 = 21;
pub const MAX_PITCH: u8 = 108;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    /// Seconds.
    pub onset: f64,
    /// Seconds, strictly positive.
    pub duration: f64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: f64, duration: f64, velocity: u8) -> Result<Self> {
        let note = NoteEvent { pitch, onset, duration, velocity };
        note.validate()?;
        Ok(note)
    }

    pub fn offset(&self) -> f64 {
        self.onset + self.duration
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_PITCH..=MAX_PITCH).contains(&self.pitch) {
            return Err(Error::invalid(format!("pitch {} outside {MIN_PITCH}..={MAX_PITCH}", self.pitch)));
        }
        if !self.onset.is_finite() || self.onset < 0.0 {
            return Err(Error::invalid(format!("onset {} must be finite and >= 0", self.onset)));
        }
        if !self.duration.is_finite() || self.duration <= 0.0 {
            return Err(Error::invalid(format!("duration {} must be > 0", self.duration)));
        }
        if !(1..=127).contains(&self.velocity) {
            return Err(Error::invalid(format!("velocity {} outside 1..=127", self.velocity)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempoEvent {
    pub time: f64,
    pub bpm: f64,
}

/// A symbolic piano performance: notes ordered by (onset, pitch) plus a tempo map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PianoPerformance {
    notes: Vec<NoteEvent>,
    tempo_events: Vec<TempoEvent>,
    length: f64,
}

fn note_order(a: &NoteEvent, b: &NoteEvent) -> std::cmp::Ordering {
    a.onset
        .total_cmp(&b.onset)
        .then(a.pitch.cmp(&b.pitch))
        .then(a.duration.total_cmp(&b.duration))
        .then(a.velocity.cmp(&b.velocity))
}

impl PianoPerformance {
    /// Builds a performance, sorting notes and tempo events. `length` of
    /// `None` means "end of the last sounding note".
    pub fn new(mut notes: Vec<NoteEvent>, mut tempo_events: Vec<TempoEvent>, length: Option<f64>) -> Result<Self> {
        for n in &notes {
            n.validate()?;
        }
        for t in &tempo_events {
            if !(t.bpm.is_finite() && t.bpm > 0.0) || !t.time.is_finite() {
                return Err(Error::invalid(format!("bad tempo event {t:?}")));
            }
        }
        notes.sort_by(note_order);
        tempo_events.sort_by(|a, b| a.time.total_cmp(&b.time));
        let natural = notes.iter().map(NoteEvent::offset).fold(0.0, f64::max);
        let length = length.unwrap_or(natural);
        if !length.is_finite() || length < 0.0 {
            return Err(Error::invalid(format!("length {length} must be finite and >= 0")));
        }
        if let Some(last) = notes.last() {
            if last.onset > length {
                return Err(Error::invalid(format!("onset {} beyond performance length {length}", last.onset)));
            }
        }
        Ok(PianoPerformance { notes, tempo_events, length })
    }

    pub fn empty(length: f64) -> Self {
        PianoPerformance { notes: Vec::new(), tempo_events: Vec::new(), length }
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn tempo_events(&self) -> &[TempoEvent] {
        &self.tempo_events
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn onsets(&self) -> Vec<f64> {
        self.notes.iter().map(|n| n.onset).collect()
    }

    /// Shifts every pitch by `semitones`. Fails if a note leaves the piano range.
    pub fn transpose(&self, semitones: i32) -> Result<Self> {
        let notes = self
            .notes
            .iter()
            .map(|n| {
                let p = n.pitch as i32 + semitones;
                if !(MIN_PITCH as i32..=MAX_PITCH as i32).contains(&p) {
                    return Err(Error::invalid(format!("transposed pitch {p} out of range")));
                }
                Ok(NoteEvent { pitch: p as u8, ..*n })
            })
            .collect::<Result<Vec<_>>>()?;
        PianoPerformance::new(notes, self.tempo_events.clone(), Some(self.length))
    }

    /// Tempo in effect at time `t`; the first event's tempo extends backwards.
    pub fn tempo_at(&self, t: f64) -> Option<f64> {
        let first = self.tempo_events.first()?;
        let mut bpm = first.bpm;
        for e in &self.tempo_events {
            if e.time <= t {
                bpm = e.bpm;
            } else {
                break;
            }
        }
        Some(bpm)
    }
}
