//! REMI-style token representation of piano performances.

pub mod chord;
pub mod codec;
pub mod io;
pub mod vocab;

pub use chord::{extract_chords, Chord, ChordChange, ChordLabel, ChordQuality};
pub use codec::{decode, decode_full, encode, grid_notes, Decoded, GridNote, TokenSequence};
pub use vocab::{SpecialToken, Token, VocabConfig, Vocabulary};
