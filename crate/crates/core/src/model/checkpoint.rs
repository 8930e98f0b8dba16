//! Checkpoint directories: `params.bin` (little-endian f64), an optional
//! `optimizer.bin` (Adam first then second moments) and `manifest.json`.
//! Every file is written to a temporary name and renamed into place, with the
//! manifest last.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::AdamState;
use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub stage: Stage,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<f64>,
    pub optimizer: Option<AdamState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    version: String,
    config: ModelConfig,
    config_hash: String,
    stage: Stage,
    step: u64,
    seed: u64,
    param_count: usize,
    #[serde(default)]
    adam_step: Option<u64>,
}

/// SHA-256 of the canonical JSON form of a config, hex encoded.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Checkpoint(format!("{what} has {} bytes, not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let dst = dir.join(name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

impl ModelCheckpoint {
    pub fn new(model: &Model, stage: Stage, step: u64, seed: u64, optimizer: Option<AdamState>) -> Self {
        ModelCheckpoint { config: model.config.clone(), stage, step, seed, params: model.params.clone(), optimizer }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(dir, "params.bin", &to_bytes(&self.params))?;
        if let Some(opt) = &self.optimizer {
            let mut bytes = to_bytes(&opt.m);
            bytes.extend(to_bytes(&opt.v));
            write_atomic(dir, "optimizer.bin", &bytes)?;
        } else if dir.join("optimizer.bin").exists() {
            let stale = dir.join("optimizer.bin");
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        let manifest = Manifest {
            format: FORMAT_VERSION,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            config_hash: self.config_hash(),
            stage: self.stage,
            step: self.step,
            seed: self.seed,
            param_count: self.params.len(),
            adam_step: self.optimizer.as_ref().map(|o| o.t),
        };
        write_atomic(dir, "manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format)));
        }
        if config_hash(&m.config) != m.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let ppath = dir.join("params.bin");
        let params = from_bytes(&fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?, "params.bin")?;
        if params.len() != m.param_count {
            return Err(Error::Checkpoint(format!(
                "params.bin holds {} values, manifest says {}",
                params.len(),
                m.param_count
            )));
        }
        let optimizer = match m.adam_step {
            Some(t) => {
                let opath = dir.join("optimizer.bin");
                let mut mv = from_bytes(&fs::read(&opath).map_err(|e| Error::io(&opath, e))?, "optimizer.bin")?;
                if mv.len() != 2 * params.len() {
                    return Err(Error::Checkpoint("optimizer.bin size does not match the parameters".into()));
                }
                let v = mv.split_off(params.len());
                Some(AdamState { m: mv, v, t })
            }
            None => None,
        };
        let ck = ModelCheckpoint { config: m.config, stage: m.stage, step: m.step, seed: m.seed, params, optimizer };
        // validates the parameter count against the layout
        ck.model()?;
        Ok(ck)
    }

    /// Loads and checks that the checkpoint was trained with `expected`.
    pub fn load_expecting(dir: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(dir)?;
        if ck.config_hash() != config_hash(expected) {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match the requested config {}",
                ck.config_hash(),
                config_hash(expected)
            )));
        }
        Ok(ck)
    }
}
