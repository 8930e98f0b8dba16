//! Encoding performances into bar-structured token sequences and back.

use serde::{Deserialize, Serialize};

use super::chord::{Chord, ChordChange};
use super::vocab::{SpecialToken, Token, Vocabulary};
use crate::error::{Error, Result};
use crate::grid::{BeatGrid, SUBDIVISIONS_PER_BEAT};
use crate::performance::{NoteEvent, PianoPerformance, TempoEvent};

/// Token ids plus the half-open `[start, end)` span of every bar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub bar_spans: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn bar_count(&self) -> usize {
        self.bar_spans.len()
    }

    pub fn bar(&self, k: usize) -> &[u32] {
        let (s, e) = self.bar_spans[k];
        &self.ids[s..e]
    }

    /// Rebuilds bar spans by scanning for bar markers.
    pub fn from_ids(ids: Vec<u32>, vocab: &Vocabulary) -> Result<Self> {
        let start = vocab.id_of(Token::BarStart);
        let end = vocab.id_of(Token::BarEnd);
        let mut spans = Vec::new();
        let mut open = None;
        for (i, &id) in ids.iter().enumerate() {
            if id == start {
                if open.is_some() {
                    return Err(Error::Decode { offset: i, reason: "nested Bar_start".into() });
                }
                open = Some(i);
            } else if id == end {
                let s = open.take().ok_or(Error::Decode { offset: i, reason: "Bar_end without Bar_start".into() })?;
                spans.push((s, i + 1));
            }
        }
        if open.is_some() {
            return Err(Error::Decode { offset: ids.len(), reason: "bar without Bar_end".into() });
        }
        Ok(TokenSequence { ids, bar_spans: spans })
    }

    /// Checks that spans are ordered, non-overlapping and delimited by bar markers.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let start = vocab.id_of(Token::BarStart);
        let end = vocab.id_of(Token::BarEnd);
        let mut prev_end = 0;
        for &(s, e) in &self.bar_spans {
            if s < prev_end || e <= s + 1 || e > self.ids.len() {
                return Err(Error::Decode { offset: s, reason: format!("bad bar span ({s}, {e})") });
            }
            if self.ids[s] != start {
                return Err(Error::Decode { offset: s, reason: "span does not open with Bar_start".into() });
            }
            if self.ids[e - 1] != end {
                return Err(Error::Decode { offset: e - 1, reason: "span does not close with Bar_end".into() });
            }
            if self.ids[s + 1..e - 1].iter().any(|&i| i == start || i == end) {
                return Err(Error::Decode { offset: s, reason: "bar marker inside span".into() });
            }
            prev_end = e;
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= vocab.size()) {
            return Err(Error::Decode { offset: 0, reason: format!("token id {id} out of range") });
        }
        Ok(())
    }

    pub fn tokens(&self, vocab: &Vocabulary) -> Vec<Token> {
        self.ids.iter().filter_map(|&i| vocab.token(i)).collect()
    }
}

/// A note expressed on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridNote {
    pub bar: usize,
    pub position: usize,
    pub pitch: u8,
    /// 16th notes.
    pub duration: usize,
    pub velocity_bin: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Tempo(u8),
    Chord(Option<Chord>),
    Note { pitch: u8, duration: u8, velocity: u8 },
}

/// Quantizes every note of `perf` onto the grid.
pub fn grid_notes(perf: &PianoPerformance, grid: &BeatGrid, vocab: &Vocabulary) -> Result<Vec<GridNote>> {
    let bars = grid.bars();
    let sub = SUBDIVISIONS_PER_BEAT;
    perf.notes()
        .iter()
        .enumerate()
        .map(|(index, n)| {
            let outside = || Error::NoteOutsideGrid { index, pitch: n.pitch, onset: n.onset };
            let q = grid.quantize_time(n.onset, sub).map_err(|_| outside())?;
            let bar = bars.get(q.bar).ok_or_else(outside)?;
            if q.position >= bar.beats() * sub || q.position >= vocab.config().positions_per_bar {
                return Err(outside());
            }
            let off = grid.nearest_subdivision(n.offset(), sub);
            let duration = (off - q.subdivision as i64).clamp(1, vocab.config().max_duration as i64) as usize;
            Ok(GridNote {
                bar: q.bar,
                position: q.position,
                pitch: n.pitch,
                duration,
                velocity_bin: vocab.velocity_bin(n.velocity),
            })
        })
        .collect()
}

/// Encodes a performance bar by bar. Within a bar events are ordered by
/// position, then tempo, chord, notes (ascending pitch); a Position token is
/// emitted only when the position changes; each note is Pitch, Duration,
/// Velocity.
pub fn encode(
    perf: &PianoPerformance,
    grid: &BeatGrid,
    chords: Option<&[ChordChange]>,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    grid.check_four_four()?;
    let bars = grid.bars();
    let sub = SUBDIVISIONS_PER_BEAT;
    let mut events: Vec<Vec<(usize, Event)>> = vec![Vec::new(); bars.len()];

    for n in grid_notes(perf, grid, vocab)? {
        if vocab.id(Token::Pitch(n.pitch)).is_none() {
            return Err(Error::invalid(format!("pitch {} not in vocabulary", n.pitch)));
        }
        events[n.bar]
            .push((n.position, Event::Note { pitch: n.pitch, duration: n.duration as u8, velocity: n.velocity_bin }));
    }

    if !bars.is_empty() {
        let start = grid.beat_times()[bars[0].start_beat];
        if let Some(bpm) = perf.tempo_at(start) {
            let mut current = vocab.tempo_bin(bpm);
            events[0].push((0, Event::Tempo(current)));
            for e in perf.tempo_events().iter().filter(|e| e.time > start) {
                let Ok(q) = grid.quantize_time(e.time, sub) else { continue };
                let bin = vocab.tempo_bin(e.bpm);
                if bin == current || q.bar >= bars.len() || q.position >= bars[q.bar].beats() * sub {
                    continue;
                }
                let slot = &mut events[q.bar];
                // a later change at the same position replaces the earlier one
                slot.retain(|(p, ev)| !(*p == q.position && matches!(ev, Event::Tempo(_))));
                slot.push((q.position, Event::Tempo(bin)));
                current = bin;
            }
        }
    }

    if let Some(chords) = chords {
        for c in chords {
            let Ok(q) = grid.quantize_time(c.time, sub) else { continue };
            if q.bar >= bars.len() || q.position >= bars[q.bar].beats() * sub {
                continue;
            }
            let slot = &mut events[q.bar];
            slot.retain(|(p, ev)| !(*p == q.position && matches!(ev, Event::Chord(_))));
            slot.push((q.position, Event::Chord(c.chord)));
        }
    }

    let mut ids = Vec::new();
    let mut spans = Vec::with_capacity(bars.len());
    for mut bar_events in events {
        bar_events.sort();
        let start = ids.len();
        ids.push(vocab.id_of(Token::BarStart));
        let mut pos = None;
        for (p, ev) in bar_events {
            if pos != Some(p) {
                ids.push(vocab.id_of(Token::Position(p as u8)));
                pos = Some(p);
            }
            match ev {
                Event::Tempo(b) => ids.push(vocab.id_of(Token::Tempo(b))),
                Event::Chord(c) => ids.push(vocab.id_of(Token::Chord(c))),
                Event::Note { pitch, duration, velocity } => {
                    ids.push(vocab.id_of(Token::Pitch(pitch)));
                    ids.push(vocab.id_of(Token::Duration(duration)));
                    ids.push(vocab.id_of(Token::Velocity(velocity)));
                }
            }
        }
        ids.push(vocab.id_of(Token::BarEnd));
        spans.push((start, ids.len()));
    }
    Ok(TokenSequence { ids, bar_spans: spans })
}

/// Everything recovered from a token stream.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub performance: PianoPerformance,
    pub notes: Vec<GridNote>,
    pub chords: Vec<ChordChange>,
}

/// Inverse of [`encode`]: onsets and durations land on grid points,
/// velocities on bin centres, tempi on bin representatives.
pub fn decode(seq: &TokenSequence, grid: &BeatGrid, vocab: &Vocabulary) -> Result<PianoPerformance> {
    decode_full(seq, grid, vocab).map(|d| d.performance)
}

pub fn decode_full(seq: &TokenSequence, grid: &BeatGrid, vocab: &Vocabulary) -> Result<Decoded> {
    let sub = SUBDIVISIONS_PER_BEAT as f64;
    let err = |offset: usize, reason: &str| Error::Decode { offset, reason: reason.to_string() };

    let mut notes = Vec::new();
    let mut grid_notes = Vec::new();
    let mut tempos = Vec::new();
    let mut chords = Vec::new();
    let mut bar: Option<usize> = None; // open bar index
    let mut next_bar = 0usize;
    let mut pos: Option<usize> = None;
    let mut end_time: f64 = 0.0;
    let ids = &seq.ids;
    let mut i = 0;
    while i < ids.len() {
        let tok = vocab.token(ids[i]).ok_or_else(|| err(i, "unknown token id"))?;
        match (bar, tok) {
            (None, Token::BarStart) => {
                bar = Some(next_bar);
                next_bar += 1;
                pos = None;
            }
            (None, Token::Spec(_)) => {}
            (None, Token::BarEnd) => return Err(err(i, "Bar_end without Bar_start")),
            (None, _) => return Err(err(i, "token outside a bar")),
            (Some(_), Token::BarStart) => return Err(err(i, "Bar_start inside an open bar")),
            (Some(k), Token::BarEnd) => {
                let beat = grid.bar_start_beat(k) as f64 + (vocab.config().positions_per_bar as f64 / sub);
                end_time = end_time.max(grid.time_at_beat(beat));
                bar = None;
            }
            (Some(_), Token::Spec(SpecialToken::Pad)) => {}
            (Some(_), Token::Spec(_)) => return Err(err(i, "special token inside a bar")),
            (Some(_), Token::Position(p)) => pos = Some(p as usize),
            (Some(k), Token::Tempo(b)) => {
                let p = pos.ok_or_else(|| err(i, "Tempo before any Position"))?;
                tempos.push(TempoEvent { time: grid.time_at(k, p, SUBDIVISIONS_PER_BEAT), bpm: vocab.tempo_value(b) });
            }
            (Some(k), Token::Chord(c)) => {
                let p = pos.ok_or_else(|| err(i, "Chord before any Position"))?;
                chords.push(ChordChange { time: grid.time_at(k, p, SUBDIVISIONS_PER_BEAT), chord: c });
            }
            (Some(k), Token::Pitch(pitch)) => {
                let p = pos.ok_or_else(|| err(i, "Pitch before any Position"))?;
                let duration = match ids.get(i + 1).and_then(|&d| vocab.token(d)) {
                    Some(Token::Duration(d)) => d as usize,
                    _ => return Err(err(i + 1, "expected Duration after Pitch")),
                };
                let velocity_bin = match ids.get(i + 2).and_then(|&v| vocab.token(v)) {
                    Some(Token::Velocity(v)) => v,
                    _ => return Err(err(i + 2, "expected Velocity after Duration")),
                };
                let start_beat = grid.bar_start_beat(k) as f64;
                let onset = grid.time_at_beat(start_beat + p as f64 / sub);
                let offset = grid.time_at_beat(start_beat + (p + duration) as f64 / sub);
                notes.push(NoteEvent::new(pitch, onset, offset - onset, vocab.velocity_center(velocity_bin))?);
                grid_notes.push(GridNote { bar: k, position: p, pitch, duration, velocity_bin });
                end_time = end_time.max(offset);
                i += 3;
                continue;
            }
            (Some(_), Token::Duration(_)) => return Err(err(i, "Duration without Pitch")),
            (Some(_), Token::Velocity(_)) => return Err(err(i, "Velocity without Duration")),
        }
        i += 1;
    }
    if bar.is_some() {
        return Err(err(ids.len(), "bar without Bar_end"));
    }
    grid_notes.sort();
    let performance = PianoPerformance::new(notes, tempos, Some(end_time))?;
    Ok(Decoded { performance, notes: grid_notes, chords })
}
