use super::time_map::TimeMap;
use crate::error::Result;
use crate::grid::{BeatGrid, SUBDIVISIONS_PER_BEAT};
use crate::performance::{NoteEvent, PianoPerformance, TempoEvent};

/// Strong-alignment baseline: warps each note onto the song timeline and
/// snaps its onset to the nearest 16th-note of the song grid. The duration
/// is the warped duration, floored at one subdivision.
pub fn remap_notes(perf: &PianoPerformance, map: &TimeMap, song_grid: &BeatGrid) -> Result<PianoPerformance> {
    let sub = SUBDIVISIONS_PER_BEAT;
    let notes = perf
        .notes()
        .iter()
        .map(|n| {
            let on = map.eval(n.onset);
            let off = map.eval(n.offset());
            let (q, _) = song_grid.quantize_clamped(on, sub)?;
            let s = q.subdivision as f64;
            let onset = song_grid.time_at_beat(s / sub as f64);
            let min_len = song_grid.time_at_beat((s + 1.0) / sub as f64) - onset;
            NoteEvent::new(n.pitch, onset, (off - on).max(min_len), n.velocity)
        })
        .collect::<Result<Vec<_>>>()?;
    let tempos = perf.tempo_events().iter().map(|e| TempoEvent { time: map.eval(e.time), bpm: e.bpm }).collect();
    let end = notes.iter().map(NoteEvent::offset).fold(map.eval(perf.length()), f64::max);
    PianoPerformance::new(notes, tempos, Some(end))
}
