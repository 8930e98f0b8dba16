use std::path::Path;

use anyhow::{bail, Context};
use covergen::dataset::{FilterThresholds, MAX_LENGTH_DEVIATION, MIN_MCA, SEGMENT_LENGTH};
use covergen::model::{config_hash, GenerationConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Every tunable the commands read. Loaded from `--config`, then overridden
/// by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub jobs: usize,
    pub min_mca: f64,
    pub max_length_dev: f64,
    pub segment_len: usize,
    /// Preset name: toy, desk or full.
    pub model: String,
    /// Explicit model config; replaces the preset when present.
    pub model_config: Option<ModelConfig>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub steps: usize,
    pub grad_clip: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub allow_scratch_finetune: bool,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens_per_bar: usize,
    pub extract_chords: bool,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::default();
        let generation = GenerationConfig::default();
        Config {
            seed: 0,
            jobs: 1,
            min_mca: MIN_MCA,
            max_length_dev: MAX_LENGTH_DEVIATION,
            segment_len: SEGMENT_LENGTH,
            model: "desk".into(),
            model_config: None,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            alpha: train.alpha,
            steps: train.steps,
            grad_clip: train.grad_clip,
            checkpoint_every: None,
            allow_scratch_finetune: false,
            temperature: generation.temperature,
            top_p: generation.top_p,
            max_tokens_per_bar: generation.max_tokens_per_bar,
            extract_chords: true,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Config> {
        let Some(path) = path else { return Ok(Config::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::Error::new(ConfigError(format!("{}: {e}", path.display()))))
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn thresholds(&self) -> FilterThresholds {
        FilterThresholds { min_mca: self.min_mca, max_length_deviation: self.max_length_dev }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            alpha: self.alpha,
            steps: self.steps,
            seed: self.seed,
            grad_clip: self.grad_clip,
            checkpoint_every: self.checkpoint_every,
            allow_scratch_finetune: self.allow_scratch_finetune,
            ..TrainConfig::default()
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens_per_bar: self.max_tokens_per_bar,
            seed: self.seed,
        }
    }

    /// The model config for a corpus whose condition rows have `input_dim`
    /// columns and whose segments hold up to `segment_len` tokens.
    pub fn model_config(&self, vocab_size: usize, input_dim: usize, segment_len: usize) -> anyhow::Result<ModelConfig> {
        let mut mc = match (&self.model_config, self.model.as_str()) {
            (Some(mc), _) => mc.clone(),
            (None, "toy") => ModelConfig::toy(vocab_size, input_dim),
            (None, "desk") => ModelConfig::desk(vocab_size),
            (None, "full") => ModelConfig::full(vocab_size),
            (None, other) => bail!(ConfigError(format!("unknown model preset {other:?}; expected toy, desk or full"))),
        };
        mc.encoder.input_dim = input_dim;
        if mc.max_positions < segment_len {
            bail!(ConfigError(format!(
                "segments of {segment_len} tokens exceed the model's {} positions; rebuild the dataset with a smaller segment_len",
                mc.max_positions
            )));
        }
        mc.validate()?;
        Ok(mc)
    }
}

/// A malformed or inconsistent configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}
