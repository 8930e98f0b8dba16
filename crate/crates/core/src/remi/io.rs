//! JSONL persistence for token sequences.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::codec::TokenSequence;
use crate::error::Result;

/// One line of a token JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: String,
    pub tokens: Vec<u32>,
    pub bar_spans: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl TokenRecord {
    pub fn new(id: impl Into<String>, seq: &TokenSequence) -> Self {
        TokenRecord {
            id: id.into(),
            tokens: seq.ids.clone(),
            bar_spans: seq.bar_spans.clone(),
            version: None,
            config_hash: None,
        }
    }

    pub fn sequence(&self) -> TokenSequence {
        TokenSequence { ids: self.tokens.clone(), bar_spans: self.bar_spans.clone() }
    }
}

pub fn write_jsonl<T: Serialize>(mut out: impl Write, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| crate::Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(input: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| crate::Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
