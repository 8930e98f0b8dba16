//! Token classes, binning rules and the id enumeration.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::chord::{Chord, ChordLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpecialToken {
    Pad,
    Bos,
    Eos,
    /// Segment continuation marker.
    Ss,
    Unk,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 5] =
        [SpecialToken::Pad, SpecialToken::Bos, SpecialToken::Eos, SpecialToken::Ss, SpecialToken::Unk];

    fn name(self) -> &'static str {
        match self {
            SpecialToken::Pad => "pad",
            SpecialToken::Bos => "bos",
            SpecialToken::Eos => "eos",
            SpecialToken::Ss => "ss",
            SpecialToken::Unk => "unk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Spec(SpecialToken),
    BarStart,
    BarEnd,
    Position(u8),
    Chord(Option<Chord>),
    Tempo(u8),
    Pitch(u8),
    /// Length in 16th notes, 1-based.
    Duration(u8),
    Velocity(u8),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Spec(s) => write!(f, "Spec_{}", s.name()),
            Token::BarStart => f.write_str("Bar_start"),
            Token::BarEnd => f.write_str("Bar_end"),
            Token::Position(p) => write!(f, "Position_{p}"),
            Token::Chord(c) => write!(f, "Chord_{}", ChordLabel(*c)),
            Token::Tempo(b) => write!(f, "Tempo_{b}"),
            Token::Pitch(p) => write!(f, "Pitch_{p}"),
            Token::Duration(d) => write!(f, "Duration_{d}"),
            Token::Velocity(b) => write!(f, "Velocity_{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub positions_per_bar: usize,
    pub min_pitch: u8,
    pub max_pitch: u8,
    pub max_duration: usize,
    pub tempo_bins: usize,
    pub tempo_min_bpm: f64,
    pub tempo_max_bpm: f64,
    pub velocity_bins: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            positions_per_bar: 16,
            min_pitch: 21,
            max_pitch: 108,
            max_duration: 32,
            tempo_bins: 64,
            tempo_min_bpm: 32.0,
            tempo_max_bpm: 224.0,
            velocity_bins: 32,
        }
    }
}

impl VocabConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("vocabulary config: {m}")));
        if self.positions_per_bar == 0 || self.positions_per_bar > 256 {
            return bad("positions_per_bar must be in 1..=256");
        }
        if self.min_pitch > self.max_pitch || self.max_pitch > 127 {
            return bad("pitch range");
        }
        if self.max_duration == 0 || self.max_duration > 255 {
            return bad("max_duration must be in 1..=255");
        }
        if self.tempo_bins == 0 || self.tempo_bins > 256 {
            return bad("tempo_bins must be in 1..=256");
        }
        if !(self.tempo_min_bpm > 0.0 && self.tempo_max_bpm > self.tempo_min_bpm) {
            return bad("tempo range");
        }
        if self.velocity_bins == 0 || self.velocity_bins > 127 {
            return bad("velocity_bins must be in 1..=127");
        }
        Ok(())
    }
}

/// Bijective token/id table. Ids follow a fixed enumeration: special tokens,
/// bar markers, positions, chords (root-major) then no-chord, tempo bins,
/// pitches, durations, velocity bins.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    config: VocabConfig,
    tokens: Vec<Token>,
    ids: HashMap<Token, u32>,
}

impl Vocabulary {
    pub fn new(config: VocabConfig) -> Result<Self> {
        config.validate()?;
        let mut tokens = Vec::new();
        tokens.extend(SpecialToken::ALL.map(Token::Spec));
        tokens.push(Token::BarStart);
        tokens.push(Token::BarEnd);
        tokens.extend((0..config.positions_per_bar).map(|p| Token::Position(p as u8)));
        tokens.extend(Chord::all().map(|c| Token::Chord(Some(c))));
        tokens.push(Token::Chord(None));
        tokens.extend((0..config.tempo_bins).map(|b| Token::Tempo(b as u8)));
        tokens.extend((config.min_pitch..=config.max_pitch).map(Token::Pitch));
        tokens.extend((1..=config.max_duration).map(|d| Token::Duration(d as u8)));
        tokens.extend((0..config.velocity_bins).map(|b| Token::Velocity(b as u8)));
        let ids = tokens.iter().enumerate().map(|(i, t)| (*t, i as u32)).collect();
        Ok(Vocabulary { config, tokens, ids })
    }

    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: Token) -> Option<u32> {
        self.ids.get(&token).copied()
    }

    /// Id of a token known to be in the vocabulary.
    pub fn id_of(&self, token: Token) -> u32 {
        self.id(token).unwrap_or_else(|| panic!("{token} is not in the vocabulary"))
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn count_where(&self, f: impl Fn(&Token) -> bool) -> usize {
        self.tokens.iter().filter(|t| f(t)).count()
    }

    pub fn velocity_bin(&self, velocity: u8) -> u8 {
        let bins = self.config.velocity_bins;
        let v = velocity.clamp(1, 127) as usize - 1;
        ((v * bins) / 127).min(bins - 1) as u8
    }

    /// Midpoint of the integer velocities falling into `bin`.
    pub fn velocity_center(&self, bin: u8) -> u8 {
        let bins = self.config.velocity_bins;
        let b = (bin as usize).min(bins - 1);
        // smallest v-1 with (v-1)*bins/127 >= b, i.e. ceil(b*127/bins)
        let lo = (b * 127).div_ceil(bins);
        let hi = ((b + 1) * 127).div_ceil(bins) - 1;
        (1 + (lo + hi.min(126)) / 2) as u8
    }

    /// Log-spaced bin, clamped to the configured BPM range.
    pub fn tempo_bin(&self, bpm: f64) -> u8 {
        let c = &self.config;
        let ratio = (bpm / c.tempo_min_bpm).ln() / (c.tempo_max_bpm / c.tempo_min_bpm).ln();
        let b = (ratio * c.tempo_bins as f64).floor();
        b.clamp(0.0, (c.tempo_bins - 1) as f64) as u8
    }

    /// Geometric centre of a tempo bin.
    pub fn tempo_value(&self, bin: u8) -> f64 {
        let c = &self.config;
        let span = (c.tempo_max_bpm / c.tempo_min_bpm).ln();
        c.tempo_min_bpm * ((bin as f64 + 0.5) / c.tempo_bins as f64 * span).exp()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "size": self.size(),
            "config": self.config,
            "tokens": self.tokens.iter().enumerate()
                .map(|(i, t)| serde_json::json!({"id": i, "name": t.to_string()}))
                .collect::<Vec<_>>(),
        })
    }

    /// Rebuilds a vocabulary from a dump, checking the id table matches.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let config: VocabConfig = serde_json::from_value(value["config"].clone())?;
        let vocab = Vocabulary::new(config)?;
        let entries =
            value["tokens"].as_array().ok_or_else(|| Error::invalid("vocabulary dump lacks a token table"))?;
        if entries.len() != vocab.size() {
            return Err(Error::invalid("vocabulary dump size mismatch"));
        }
        for (i, e) in entries.iter().enumerate() {
            if e["id"].as_u64() != Some(i as u64) || e["name"].as_str() != Some(&vocab.tokens[i].to_string()) {
                return Err(Error::invalid(format!("vocabulary dump differs at id {i}")));
            }
        }
        Ok(vocab)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new(VocabConfig::default()).expect("default config is valid")
    }
}
