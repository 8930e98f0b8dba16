//! Piano cover generation toolkit.
//!
//! Beat-level weak alignment of song / piano-cover pairs, REMI tokenization,
//! interleaved condition/target sequences for a decoder-only transformer with
//! two-stage training, and objective evaluation metrics.

pub mod alignment;
pub mod beat_align;
pub mod dataset;
pub mod encoder;
mod error;
pub mod features;
pub mod grid;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod nn;
pub mod performance;
pub mod remi;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{Bar, BeatGrid, GridPosition};
pub use performance::{NoteEvent, PianoPerformance, TempoEvent};
