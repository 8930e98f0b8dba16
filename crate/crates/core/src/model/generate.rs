//! Bar-by-bar generation.
//!
//! For each bar the condition block is appended, `[Bar_start]` is forced and
//! tokens are decoded under a small grammar: a Position must open the bar's
//! events, each Pitch is followed by a Duration and a Velocity, and
//! `[Bar_end]` is forced once the per-bar budget runs out. When the context
//! would exceed `max_positions`, the oldest bars are dropped and the window is
//! re-opened with `[ss]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::dataset::Slot;
use crate::encoder::ConditionBlock;
use crate::error::{Error, Result};
use crate::remi::{SpecialToken, Token, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens_per_bar: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { temperature: 1.0, top_p: 0.9, max_tokens_per_bar: 128, seed: 0 }
    }
}

impl GenerationConfig {
    pub fn greedy(max_tokens_per_bar: usize) -> Self {
        GenerationConfig { temperature: 0.0, top_p: 1.0, max_tokens_per_bar, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Free { has_position: bool },
    AfterPitch,
    AfterDuration,
}

fn allowed(token: Token, state: State, remaining: usize) -> bool {
    match state {
        State::AfterPitch => matches!(token, Token::Duration(_)),
        State::AfterDuration => matches!(token, Token::Velocity(_)),
        State::Free { has_position } => {
            if remaining <= 1 {
                return token == Token::BarEnd;
            }
            match token {
                Token::BarEnd | Token::Position(_) => true,
                Token::Chord(_) | Token::Tempo(_) => has_position,
                Token::Pitch(_) => has_position && remaining >= 4,
                _ => false,
            }
        }
    }
}

fn pick<R: Rng>(logits: &[f64], mask: &[bool], cfg: &GenerationConfig, rng: &mut R) -> u32 {
    let candidates: Vec<usize> = (0..logits.len()).filter(|&i| mask[i]).collect();
    if cfg.temperature <= 0.0 {
        let mut best = candidates[0];
        for &i in &candidates[1..] {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let max = candidates.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> =
        candidates.iter().map(|&i| (i, ((logits[i] - max) / cfg.temperature).exp())).collect();
    let total: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= total);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep = 0;
    let mut mass = 0.0;
    while keep < probs.len() {
        mass += probs[keep].1;
        keep += 1;
        if mass >= cfg.top_p {
            break;
        }
    }
    probs.truncate(keep);
    let r = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &(i, p) in &probs {
        acc += p;
        if r < acc {
            return i as u32;
        }
    }
    probs.last().map(|p| p.0 as u32).unwrap()
}

struct Window<'a> {
    blocks: &'a [ConditionBlock],
    /// (block index, tokens) per bar, oldest first.
    bars: Vec<(usize, Vec<u32>)>,
    first: usize,
}

impl Window<'_> {
    fn slots_len(&self, from: usize) -> usize {
        1 + self.bars[from..].iter().map(|(b, t)| self.blocks[*b].rows() + t.len()).sum::<usize>()
    }

    fn input(&self, bos: u32, ss: u32) -> (Vec<Slot>, Vec<ConditionBlock>) {
        let marker = if self.first == 0 { bos } else { ss };
        let mut slots = vec![Slot::Token(marker)];
        let mut blocks = Vec::new();
        for (b, toks) in &self.bars[self.first..] {
            let local = blocks.len();
            blocks.push(self.blocks[*b].clone());
            slots.extend((0..self.blocks[*b].rows()).map(|row| Slot::Condition { block: local, row }));
            slots.extend(toks.iter().map(|&t| Slot::Token(t)));
        }
        (slots, blocks)
    }
}

/// Generates one bar per condition block.
pub fn generate(
    model: &Model,
    vocab: &Vocabulary,
    blocks: &[ConditionBlock],
    cfg: &GenerationConfig,
) -> Result<TokenSequence> {
    if vocab.size() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "model vocabulary {} does not match the tokenizer's {}",
            model.config.vocab_size,
            vocab.size()
        )));
    }
    if cfg.max_tokens_per_bar < 2 {
        return Err(Error::invalid("max_tokens_per_bar must allow Bar_start and Bar_end"));
    }
    if !(cfg.top_p > 0.0 && cfg.top_p <= 1.0) || cfg.temperature.is_nan() {
        return Err(Error::invalid("top_p must lie in (0, 1] and temperature must be a number"));
    }
    for b in blocks {
        if b.rows() + cfg.max_tokens_per_bar + 1 > model.config.max_positions {
            return Err(Error::invalid(format!(
                "bar {} cannot fit in {} positions",
                b.bar, model.config.max_positions
            )));
        }
    }
    let bos = vocab.id_of(Token::Spec(SpecialToken::Bos));
    let ss = vocab.id_of(Token::Spec(SpecialToken::Ss));
    let bar_start = vocab.id_of(Token::BarStart);
    let bar_end = vocab.id_of(Token::BarEnd);
    let tokens: Vec<Token> = (0..vocab.size() as u32).map(|i| vocab.token(i).unwrap()).collect();
    let v = vocab.size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut window = Window { blocks, bars: Vec::new(), first: 0 };
    let mut ids = Vec::new();

    for k in 0..blocks.len() {
        window.bars.push((k, vec![bar_start]));
        let mut state = State::Free { has_position: false };
        loop {
            let current = &window.bars[k].1;
            let remaining = cfg.max_tokens_per_bar - current.len();
            let mask: Vec<bool> = tokens.iter().map(|&t| allowed(t, state, remaining)).collect();
            let next = if mask.iter().filter(|&&m| m).count() == 1 {
                mask.iter().position(|&m| m).unwrap() as u32
            } else {
                while window.slots_len(window.first) + 1 > model.config.max_positions {
                    window.first += 1;
                }
                let (slots, blks) = window.input(bos, ss);
                let logits = model.forward(&slots, &blks)?;
                let last = &logits[(slots.len() - 1) * v..slots.len() * v];
                pick(last, &mask, cfg, &mut rng)
            };
            window.bars[k].1.push(next);
            if next == bar_end {
                break;
            }
            state = match (state, tokens[next as usize]) {
                (State::Free { .. }, Token::Position(_)) => State::Free { has_position: true },
                (State::Free { .. }, Token::Pitch(_)) => State::AfterPitch,
                (State::AfterPitch, _) => State::AfterDuration,
                (State::AfterDuration, _) => State::Free { has_position: true },
                (s, _) => s,
            };
        }
        ids.extend_from_slice(&window.bars[k].1);
    }
    TokenSequence::from_ids(ids, vocab)
}
