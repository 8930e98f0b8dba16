//! Standard MIDI File reading and writing for [`PianoPerformance`].

use std::collections::HashMap;
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

use crate::error::{Error, Result};
use crate::performance::{NoteEvent, PianoPerformance, TempoEvent, MAX_PITCH, MIN_PITCH};

const WRITE_TICKS_PER_BEAT: u16 = 480;
const DEFAULT_BPM: f64 = 120.0;

/// Piecewise-constant tempo map in ticks.
struct TickClock {
    ticks_per_beat: f64,
    /// (tick, seconds at tick, microseconds per beat)
    segments: Vec<(u64, f64, f64)>,
}

impl TickClock {
    fn new(ticks_per_beat: u16, mut changes: Vec<(u64, u32)>) -> Self {
        changes.sort_by_key(|c| c.0);
        let tpb = ticks_per_beat as f64;
        let mut segments = vec![(0u64, 0.0, 500_000.0)];
        for (tick, uspb) in changes {
            let (t0, s0, u0) = *segments.last().unwrap();
            let secs = s0 + (tick - t0) as f64 * u0 / tpb / 1e6;
            if tick == t0 {
                segments.last_mut().unwrap().2 = uspb as f64;
            } else {
                segments.push((tick, secs, uspb as f64));
            }
        }
        TickClock { ticks_per_beat: tpb, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let idx = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (t0, s0, u0) = self.segments[idx];
        s0 + (tick - t0) as f64 * u0 / self.ticks_per_beat / 1e6
    }
}

pub fn read_midi(path: &Path) -> Result<PianoPerformance> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_midi(&bytes)
}

pub fn parse_midi(bytes: &[u8]) -> Result<PianoPerformance> {
    let smf = Smf::parse(bytes).map_err(|e| Error::Midi(e.to_string()))?;
    if smf.header.format == Format::Sequential {
        return Err(Error::Midi("format 2 files are not supported".into()));
    }
    let tpb = match smf.header.timing {
        Timing::Metrical(t) => t.as_int(),
        Timing::Timecode(..) => return Err(Error::Midi("SMPTE timing is not supported".into())),
    };

    // Absolute-tick events from every track.
    let mut tempo_changes = Vec::new();
    let mut raw: Vec<(u64, u8, u8, Option<u8>)> = Vec::new(); // tick, channel, key, Some(vel)=on
    for track in &smf.tracks {
        let mut tick = 0u64;
        for ev in track {
            tick += ev.delta.as_int() as u64;
            match ev.kind {
                TrackEventKind::Meta(MetaMessage::Tempo(t)) => tempo_changes.push((tick, t.as_int())),
                TrackEventKind::Meta(MetaMessage::TimeSignature(num, den_pow, _, _)) => {
                    if num != 4 || den_pow != 2 {
                        return Err(Error::UnsupportedMeter(format!("time signature {num}/{}", 1u32 << den_pow)));
                    }
                }
                TrackEventKind::Midi { channel, message } => {
                    let ch = channel.as_int();
                    match message {
                        MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                            raw.push((tick, ch, key.as_int(), Some(vel.as_int())))
                        }
                        MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                            raw.push((tick, ch, key.as_int(), None))
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
    }
    // offs before ons at the same tick so repeated notes pair correctly
    raw.sort_by_key(|e| (e.0, e.3.is_some()));
    let clock = TickClock::new(tpb, tempo_changes.clone());

    let mut open: HashMap<(u8, u8), Vec<(u64, u8)>> = HashMap::new();
    let mut notes = Vec::new();
    let mut last_tick = 0u64;
    for (tick, ch, key, vel) in raw {
        last_tick = last_tick.max(tick);
        match vel {
            Some(v) => open.entry((ch, key)).or_default().push((tick, v)),
            None => {
                let Some(stack) = open.get_mut(&(ch, key)) else { continue };
                if stack.is_empty() {
                    continue;
                }
                let (on, v) = stack.remove(0);
                if tick == on || ch == 9 || !(MIN_PITCH..=MAX_PITCH).contains(&key) {
                    if !(MIN_PITCH..=MAX_PITCH).contains(&key) {
                        log::warn!("dropping out-of-range pitch {key}");
                    }
                    continue;
                }
                let onset = clock.seconds(on);
                notes.push(NoteEvent::new(key, onset, clock.seconds(tick) - onset, v)?);
            }
        }
    }
    if open.values().any(|s| !s.is_empty()) {
        log::warn!("dropping notes without a matching note-off");
    }
    let tempo_events = if tempo_changes.is_empty() {
        vec![TempoEvent { time: 0.0, bpm: DEFAULT_BPM }]
    } else {
        tempo_changes
            .iter()
            .map(|&(tick, uspb)| TempoEvent { time: clock.seconds(tick), bpm: 60e6 / uspb as f64 })
            .collect()
    };
    let length = clock.seconds(last_tick);
    PianoPerformance::new(notes, tempo_events, Some(length))
}

pub fn write_midi(perf: &PianoPerformance, path: &Path) -> Result<()> {
    write_midi_annotated(perf, None, path)
}

/// Like [`write_midi`], with an optional text meta event at tick 0.
pub fn write_midi_annotated(perf: &PianoPerformance, text: Option<&str>, path: &Path) -> Result<()> {
    let bytes = midi_bytes_annotated(perf, text)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serializes to a format-0 file at 480 ticks per beat.
pub fn midi_bytes(perf: &PianoPerformance) -> Result<Vec<u8>> {
    midi_bytes_annotated(perf, None)
}

pub fn midi_bytes_annotated(perf: &PianoPerformance, text: Option<&str>) -> Result<Vec<u8>> {
    let tpb = WRITE_TICKS_PER_BEAT as f64;
    let tempos: Vec<TempoEvent> = if perf.tempo_events().is_empty() {
        vec![TempoEvent { time: 0.0, bpm: DEFAULT_BPM }]
    } else {
        perf.tempo_events().to_vec()
    };
    // seconds -> ticks through the tempo map
    let mut anchors: Vec<(f64, f64, f64)> = Vec::new(); // secs, ticks, bpm
    for (k, e) in tempos.iter().enumerate() {
        let time = if k == 0 { 0.0 } else { e.time.max(0.0) };
        let ticks = match anchors.last() {
            Some(&(s0, k0, b0)) => k0 + (time - s0) * b0 / 60.0 * tpb,
            None => 0.0,
        };
        anchors.push((time, ticks, e.bpm));
    }
    let to_tick = |t: f64| -> u64 {
        let idx = anchors.partition_point(|a| a.0 <= t).max(1) - 1;
        let (s0, k0, b0) = anchors[idx];
        (k0 + (t - s0) * b0 / 60.0 * tpb).round().max(0.0) as u64
    };

    let mut events: Vec<(u64, u8, TrackEventKind<'_>)> = Vec::new();
    if let Some(text) = text {
        events.push((0, 0, TrackEventKind::Meta(MetaMessage::Text(text.as_bytes()))));
    }
    for (k, e) in tempos.iter().enumerate() {
        let uspb = (60e6 / e.bpm).round().clamp(1.0, 16_777_215.0) as u32;
        let tick = if k == 0 { 0 } else { to_tick(e.time) };
        events.push((tick, 0, TrackEventKind::Meta(MetaMessage::Tempo(u24::new(uspb)))));
    }
    events.push((0, 0, TrackEventKind::Meta(MetaMessage::TimeSignature(4, 2, 24, 8))));
    for n in perf.notes() {
        let on = to_tick(n.onset);
        let off = to_tick(n.offset()).max(on + 1);
        let key = u7::new(n.pitch);
        events.push((
            off,
            1,
            TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOff { key, vel: u7::new(0) } },
        ));
        events.push((
            on,
            2,
            TrackEventKind::Midi {
                channel: u4::new(0),
                message: MidiMessage::NoteOn { key, vel: u7::new(n.velocity) },
            },
        ));
    }
    events.sort_by_key(|e| (e.0, e.1));

    let mut track = Vec::with_capacity(events.len() + 1);
    let mut prev = 0u64;
    for (tick, _, kind) in events {
        let delta = u28::try_from((tick - prev) as u32).ok_or_else(|| Error::Midi("delta time overflow".into()))?;
        track.push(TrackEvent { delta, kind });
        prev = tick;
    }
    track.push(TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) });
    let smf = Smf {
        header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(WRITE_TICKS_PER_BEAT))),
        tracks: vec![track],
    };
    let mut out = Vec::new();
    smf.write_std(&mut out).map_err(|e| Error::Midi(e.to_string()))?;
    Ok(out)
}
