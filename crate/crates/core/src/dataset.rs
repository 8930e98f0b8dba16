//! Pair filtering, interleaved condition/target sequences and segment packing.

use serde::{Deserialize, Serialize};

use crate::beat_align::WeakAlignedPair;
use crate::encoder::{extract_beat_span, extract_condition_features, ConditionBlock};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::grid::BeatGrid;
use crate::remi::{SpecialToken, Token, TokenSequence, Vocabulary};

pub const MIN_MCA: f64 = 0.05;
pub const MAX_LENGTH_DEVIATION: f64 = 0.15;
pub const SEGMENT_LENGTH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    LowMca,
    Length,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "decision", content = "reason")]
pub enum FilterDecision {
    Keep,
    Reject(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_mca: f64,
    pub max_length_deviation: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds { min_mca: MIN_MCA, max_length_deviation: MAX_LENGTH_DEVIATION }
    }
}

/// Relative length difference, `max/min − 1`.
pub fn length_difference(len_a: f64, len_b: f64) -> Result<f64> {
    Ok(crate::stats::duration_deviation(len_a, len_b)? - 1.0)
}

/// `length_deviation` is the relative length difference (0.15 for 15%).
pub fn filter_pair(mca: f64, length_deviation: f64) -> FilterDecision {
    filter_pair_with(mca, length_deviation, &FilterThresholds::default())
}

pub fn filter_pair_with(mca: f64, length_deviation: f64, th: &FilterThresholds) -> FilterDecision {
    if mca.is_nan() || mca < th.min_mca {
        FilterDecision::Reject(RejectReason::LowMca)
    } else if length_deviation.is_nan() || length_deviation > th.max_length_deviation {
        FilterDecision::Reject(RejectReason::Length)
    } else {
        FilterDecision::Keep
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceKind {
    Paired,
    PianoOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Element {
    /// Index into the sequence's condition blocks.
    Condition { bar: usize, block: usize },
    /// Half-open span into the sequence's token ids.
    Target { bar: usize, span: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterleavedSequence {
    pub id: String,
    pub kind: SequenceKind,
    pub elements: Vec<Element>,
    pub tokens: Vec<u32>,
    pub blocks: Vec<ConditionBlock>,
}

impl InterleavedSequence {
    pub fn bars(&self) -> Vec<usize> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::Target { bar, .. } => Some(*bar),
                _ => None,
            })
            .collect()
    }

    /// Checks strict Condition/Target alternation with matching bar indices.
    pub fn check_interleaving(&self) -> Result<()> {
        if !self.elements.len().is_multiple_of(2) {
            return Err(Error::invalid("odd number of interleaved elements"));
        }
        let mut last_bar = None;
        for pair in self.elements.chunks(2) {
            match (pair[0], pair[1]) {
                (Element::Condition { bar: a, block }, Element::Target { bar: b, span }) if a == b => {
                    if block >= self.blocks.len() || span.1 > self.tokens.len() || span.0 >= span.1 {
                        return Err(Error::invalid(format!("bar {a} references missing data")));
                    }
                    if last_bar.is_some_and(|l| l >= a) {
                        return Err(Error::invalid(format!("bar {a} out of order")));
                    }
                    last_bar = Some(a);
                }
                _ => return Err(Error::invalid("elements do not alternate Condition, Target per bar")),
            }
        }
        Ok(())
    }

    /// Slot count of one bar unit (condition rows plus target tokens).
    fn unit_len(&self, k: usize) -> usize {
        match (self.elements[2 * k], self.elements[2 * k + 1]) {
            (Element::Condition { block, .. }, Element::Target { span, .. }) => {
                self.blocks[block].rows() + span.1 - span.0
            }
            _ => unreachable!("checked by check_interleaving"),
        }
    }
}

fn interleave(
    id: String,
    kind: SequenceKind,
    tokens: &TokenSequence,
    bars: impl Iterator<Item = Result<(usize, ConditionBlock)>>,
) -> Result<InterleavedSequence> {
    let mut elements = Vec::new();
    let mut blocks = Vec::new();
    for item in bars {
        let (bar, block) = item?;
        let span =
            tokens.bar_spans.get(bar).copied().ok_or_else(|| Error::invalid(format!("bar {bar} has no token span")))?;
        elements.push(Element::Condition { bar, block: blocks.len() });
        elements.push(Element::Target { bar, span });
        blocks.push(block);
    }
    if blocks.is_empty() {
        return Err(Error::invalid(format!("{id}: no valid bars")));
    }
    Ok(InterleavedSequence { id, kind, elements, tokens: tokens.ids.clone(), blocks })
}

/// The paired sequence S: each valid bar is conditioned on the song segment
/// covering song beats `[F_beat(start), F_beat(end))`.
pub fn build_interleaved_pair(id: impl Into<String>, pair: &WeakAlignedPair) -> Result<InterleavedSequence> {
    let song_grid = &pair.alignment.song_grid;
    let bars = pair.valid_bars.iter().map(|bar| {
        let (s, e) = pair.alignment.song_span(bar);
        if s >= e {
            return Err(Error::invalid(format!(
                "bar {} maps to song beats {s}..{e}; non-monotone alignment",
                bar.index
            )));
        }
        Ok((bar.index, extract_beat_span(&pair.song_features, song_grid, s, e, bar.index)?))
    });
    interleave(id.into(), SequenceKind::Paired, &pair.tokens, bars)
}

/// A piano performance without a paired song; its own features condition it.
#[derive(Debug, Clone)]
pub struct PianoRecord {
    pub id: String,
    pub tokens: TokenSequence,
    pub grid: BeatGrid,
    pub features: FeatureMatrix,
}

/// The piano-only sequence S̄: every bar conditioned on the piano's own audio
/// (or synthetic) features over the same beats.
pub fn build_interleaved_piano(record: &PianoRecord) -> Result<InterleavedSequence> {
    let bars = record.grid.bars();
    if bars.len() != record.tokens.bar_count() {
        return Err(Error::invalid(format!(
            "{}: {} grid bars but {} token bars",
            record.id,
            bars.len(),
            record.tokens.bar_count()
        )));
    }
    let blocks =
        bars.into_iter().map(|bar| Ok((bar.index, extract_condition_features(&record.features, &record.grid, &bar)?)));
    interleave(record.id.clone(), SequenceKind::PianoOnly, &record.tokens, blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Token(u32),
    /// Row `row` of the segment's block `block`.
    Condition {
        block: usize,
        row: usize,
    },
}

/// Model input for one packed window of an interleaved sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSegment {
    pub id: String,
    pub kind: SequenceKind,
    pub slots: Vec<Slot>,
    /// `loss_mask[t]` is true when the logits at `t` are trained to predict
    /// the token at `t + 1`, which requires both slots to be target tokens
    /// of the same bar. Condition slots are never masked in.
    pub loss_mask: Vec<bool>,
    /// Piece bar index per slot; `None` for the leading marker.
    pub bar_of_slot: Vec<Option<usize>>,
    pub blocks: Vec<ConditionBlock>,
}

impl TrainingSegment {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Next-token targets aligned with `loss_mask`.
    pub fn targets(&self) -> Vec<Option<u32>> {
        (0..self.slots.len())
            .map(|t| match (self.loss_mask[t], self.slots.get(t + 1)) {
                (true, Some(Slot::Token(id))) => Some(*id),
                _ => None,
            })
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

struct SegmentBuilder {
    slots: Vec<Slot>,
    loss_mask: Vec<bool>,
    bar_of_slot: Vec<Option<usize>>,
    blocks: Vec<ConditionBlock>,
}

impl SegmentBuilder {
    fn new(marker: u32) -> Self {
        SegmentBuilder {
            slots: vec![Slot::Token(marker)],
            loss_mask: vec![false],
            bar_of_slot: vec![None],
            blocks: vec![],
        }
    }

    fn push_bar(&mut self, bar: usize, block: &ConditionBlock, tokens: &[u32]) {
        let b = self.blocks.len();
        self.blocks.push(block.clone());
        for row in 0..block.rows() {
            self.slots.push(Slot::Condition { block: b, row });
            self.loss_mask.push(false);
            self.bar_of_slot.push(Some(bar));
        }
        for (i, &id) in tokens.iter().enumerate() {
            self.slots.push(Slot::Token(id));
            self.loss_mask.push(i + 1 < tokens.len());
            self.bar_of_slot.push(Some(bar));
        }
    }

    fn finish(self, seq: &InterleavedSequence) -> TrainingSegment {
        TrainingSegment {
            id: seq.id.clone(),
            kind: seq.kind,
            slots: self.slots,
            loss_mask: self.loss_mask,
            bar_of_slot: self.bar_of_slot,
            blocks: self.blocks,
        }
    }
}

/// Greedily packs whole bars into segments of at most `max_len` slots. The
/// first segment opens with `[bos]`, later ones with `[ss]`.
pub fn segment(seq: &InterleavedSequence, max_len: usize, vocab: &Vocabulary) -> Result<Vec<TrainingSegment>> {
    seq.check_interleaving()?;
    let bos = vocab.id_of(Token::Spec(SpecialToken::Bos));
    let ss = vocab.id_of(Token::Spec(SpecialToken::Ss));
    let n_bars = seq.elements.len() / 2;
    for k in 0..n_bars {
        let len = seq.unit_len(k) + 1;
        if len > max_len {
            let bar = seq.bars()[k];
            return Err(Error::OversizedBar { bar, len, max: max_len });
        }
    }
    let mut out = Vec::new();
    let mut cur = SegmentBuilder::new(bos);
    for k in 0..n_bars {
        let (Element::Condition { bar, block }, Element::Target { span, .. }) =
            (seq.elements[2 * k], seq.elements[2 * k + 1])
        else {
            unreachable!()
        };
        if cur.slots.len() + seq.unit_len(k) > max_len {
            out.push(std::mem::replace(&mut cur, SegmentBuilder::new(ss)).finish(seq));
        }
        cur.push_bar(bar, &seq.blocks[block], &seq.tokens[span.0..span.1]);
    }
    out.push(cur.finish(seq));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::remi::VocabConfig;

    fn seq_with_units(units: &[(usize, usize)], vocab: &Vocabulary) -> InterleavedSequence {
        let start = vocab.id_of(Token::BarStart);
        let end = vocab.id_of(Token::BarEnd);
        let pos = vocab.id_of(Token::Position(0));
        let mut tokens = Vec::new();
        let mut elements = Vec::new();
        let mut blocks = Vec::new();
        for (k, &(rows, ntok)) in units.iter().enumerate() {
            let s = tokens.len();
            tokens.push(start);
            tokens.extend(std::iter::repeat_n(pos, ntok - 2));
            tokens.push(end);
            elements.push(Element::Condition { bar: k, block: k });
            elements.push(Element::Target { bar: k, span: (s, tokens.len()) });
            blocks.push(ConditionBlock::new(k, 2, vec![0.0; rows * 2]).unwrap());
        }
        InterleavedSequence { id: "x".into(), kind: SequenceKind::PianoOnly, elements, tokens, blocks }
    }

    #[test]
    fn filter_examples() {
        assert_eq!(filter_pair(0.04, 0.10), FilterDecision::Reject(RejectReason::LowMca));
        assert_eq!(filter_pair(0.30, 0.20), FilterDecision::Reject(RejectReason::Length));
        assert_eq!(filter_pair(0.30, 0.05), FilterDecision::Keep);
        assert_eq!(filter_pair(0.05, 0.15), FilterDecision::Keep);
        assert!((length_difference(100.0, 115.0).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn short_sequence_is_one_segment() {
        let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
        let seq = seq_with_units(&[(4, 400), (4, 300), (4, 188)], &vocab);
        let segs = segment(&seq, 1024, &vocab).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].len(), 901);
    }

    #[test]
    fn packing_oracle() {
        let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
        // bos + 999 slots fill the first segment; the 500-slot bar moves on
        let seq = seq_with_units(&[(4, 995), (4, 496)], &vocab);
        let segs = segment(&seq, 1024, &vocab).unwrap();
        assert_eq!(segs.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![1000, 501]);
        let ss = vocab.id_of(Token::Spec(SpecialToken::Ss));
        let bos = vocab.id_of(Token::Spec(SpecialToken::Bos));
        assert_eq!(segs[0].slots[0], Slot::Token(bos));
        assert_eq!(segs[1].slots[0], Slot::Token(ss));
        let masked: usize = segs.iter().map(|s| s.masked_count()).sum();
        assert_eq!(masked, 995 + 496 - 2);
        for s in &segs {
            for (slot, m) in s.slots.iter().zip(&s.loss_mask) {
                if matches!(slot, Slot::Condition { .. }) {
                    assert!(!m);
                }
            }
        }
    }

    #[test]
    fn oversized_bar() {
        let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
        let seq = seq_with_units(&[(4, 10), (4, 1100)], &vocab);
        assert!(matches!(segment(&seq, 1024, &vocab), Err(Error::OversizedBar { bar: 1, .. })));
    }

    #[test]
    fn interleaving_check() {
        let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
        let mut seq = seq_with_units(&[(4, 10), (4, 10)], &vocab);
        assert!(seq.check_interleaving().is_ok());
        seq.elements.swap(0, 1);
        assert!(seq.check_interleaving().is_err());
    }
}
