use serde::{Deserialize, Serialize};

/// Stamped into every artifact the CLI writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(config_hash: String) -> Self {
        Provenance { version: env!("CARGO_PKG_VERSION").to_string(), config_hash }
    }

    /// One-line form for formats without structured metadata (MIDI text events).
    pub fn line(&self) -> String {
        format!("covergen {} config {}", self.version, self.config_hash)
    }
}
