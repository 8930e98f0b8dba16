//! Condition features and the trainable adapter.
//!
//! The prior encoder is a fixed, parameter-free feature extractor: for each
//! beat it pools the chroma frames the beat covers and appends an onset
//! strength and a log energy, giving 14 values per beat. Precomputed external
//! embeddings pass through mean-pooled. The adapter maps each bar's block of
//! beat vectors to decoder-width embeddings with bidirectional self-attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureSource};
use crate::grid::{Bar, BeatGrid};
use crate::nn::{self, Allocator, Init, LayerCache, LayerParams, LayerShape, Tensor};

pub const CHROMA_INPUT_DIM: usize = 14;

/// Raw per-beat condition vectors for one bar (`rows × dims`, row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionBlock {
    pub bar: usize,
    pub dims: usize,
    pub data: Vec<f64>,
}

impl ConditionBlock {
    pub fn new(bar: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if dims == 0 || data.is_empty() || !data.len().is_multiple_of(dims) {
            return Err(Error::Shape(format!("block of {} values does not split into rows of {dims}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("condition block contains non-finite values"));
        }
        Ok(ConditionBlock { bar, dims, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dims
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }
}

/// Width of the vectors produced from a feature matrix.
pub fn condition_dim(features: &FeatureMatrix) -> usize {
    match features.source() {
        FeatureSource::External => features.dims(),
        _ => CHROMA_INPUT_DIM,
    }
}

/// Frames whose centres fall in `[start, end)`; falls back to the single frame
/// nearest the interval midpoint when the interval is narrower than a frame.
fn frames_in(features: &FeatureMatrix, start: f64, end: f64) -> std::ops::Range<usize> {
    let fr = features.frame_rate();
    let n = features.count();
    let lo = ((start * fr - 0.5).ceil().max(0.0) as usize).min(n);
    let hi = ((end * fr - 0.5).ceil().max(0.0) as usize).min(n);
    if hi > lo {
        return lo..hi;
    }
    let mid = ((0.5 * (start + end) * fr) as usize).min(n - 1);
    mid..mid + 1
}

/// Condition vectors for song beats `[start_beat, end_beat)` of `grid`.
pub fn extract_beat_span(
    features: &FeatureMatrix,
    grid: &BeatGrid,
    start_beat: usize,
    end_beat: usize,
    bar: usize,
) -> Result<ConditionBlock> {
    if end_beat <= start_beat {
        return Err(Error::invalid(format!("empty beat span {start_beat}..{end_beat}")));
    }
    if features.is_empty() {
        return Err(Error::invalid("feature matrix is empty"));
    }
    let begin = grid.time_at_beat(start_beat as f64);
    if begin < 0.0 || begin >= features.duration() {
        return Err(Error::invalid(format!(
            "bar {bar} starts at {begin:.3}s, outside the {:.3}s of features",
            features.duration()
        )));
    }
    let dims = features.dims();
    let external = features.source() == FeatureSource::External;
    let out_dims = condition_dim(features);
    let mut data = Vec::with_capacity((end_beat - start_beat) * out_dims);
    for b in start_beat..end_beat {
        let range = frames_in(features, grid.time_at_beat(b as f64), grid.time_at_beat(b as f64 + 1.0));
        let count = range.len() as f64;
        let mut pooled = vec![0.0; dims];
        let mut flux = 0.0;
        for f in range {
            let frame = features.frame(f);
            for (p, v) in pooled.iter_mut().zip(frame) {
                *p += v / count;
            }
            if !external && f > 0 {
                let prev = features.frame(f - 1);
                flux += frame.iter().zip(prev).map(|(a, b)| (a - b).max(0.0)).sum::<f64>() / count;
            }
        }
        if external {
            data.extend_from_slice(&pooled);
        } else {
            let energy = (1.0 + pooled.iter().map(|v| v * v).sum::<f64>()).ln();
            data.extend_from_slice(&pooled);
            data.push(flux);
            data.push(energy);
        }
    }
    ConditionBlock::new(bar, out_dims, data)
}

pub fn extract_condition_features(features: &FeatureMatrix, grid: &BeatGrid, bar: &Bar) -> Result<ConditionBlock> {
    extract_beat_span(features, grid, bar.start_beat, bar.end_beat, bar.index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Whether the input and output projections carry biases.
    pub bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { input_dim: CHROMA_INPUT_DIM, d_model: 128, layers: 4, heads: 8, ffn_dim: 512, bias: true }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "adapter d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn shape(&self) -> LayerShape {
        LayerShape { d_model: self.d_model, heads: self.heads, ffn_dim: self.ffn_dim, causal: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub config: EncoderConfig,
    pub w_in: Tensor,
    pub b_in: Option<Tensor>,
    pub layers: Vec<LayerParams>,
    pub w_out: Tensor,
    pub b_out: Option<Tensor>,
}

impl AdapterParams {
    pub fn alloc(a: &mut Allocator, config: EncoderConfig, std: f64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let residual_std = std / (2.0 * config.layers.max(1) as f64).sqrt();
        let w_in = a.tensor(config.input_dim, d, Init::Normal(std));
        let b_in = config.bias.then(|| a.tensor(1, d, Init::Zeros));
        let layers = (0..config.layers).map(|_| LayerParams::alloc(a, d, config.ffn_dim, std, residual_std)).collect();
        let w_out = a.tensor(d, d, Init::Normal(std));
        let b_out = config.bias.then(|| a.tensor(1, d, Init::Zeros));
        Ok(AdapterParams { config, w_in, b_in, layers, w_out, b_out })
    }
}

#[derive(Debug, Clone)]
pub struct AdapterCache {
    layers: Vec<LayerCache>,
    hidden: Vec<f64>,
}

/// Embeds one block: `rows × input_dim` in, `rows × d_model` out.
pub fn adapter_forward(p: &[f64], ap: &AdapterParams, block: &ConditionBlock) -> Result<(Vec<f64>, AdapterCache)> {
    let cfg = &ap.config;
    if block.dims != cfg.input_dim {
        return Err(Error::Shape(format!(
            "condition block has {} dims, adapter expects {}",
            block.dims, cfg.input_dim
        )));
    }
    let t = block.rows();
    let d = cfg.d_model;
    let mut x = nn::linear(&block.data, t, cfg.input_dim, ap.w_in.of(p), ap.b_in.map(|b| b.of(p)), d);
    let mut caches = Vec::with_capacity(ap.layers.len());
    for lp in &ap.layers {
        let (y, c) = nn::layer_forward(p, lp, cfg.shape(), &x, t);
        caches.push(c);
        x = y;
    }
    let z = nn::linear(&x, t, d, ap.w_out.of(p), ap.b_out.map(|b| b.of(p)), d);
    Ok((z, AdapterCache { layers: caches, hidden: x }))
}

/// Accumulates adapter gradients for upstream gradient `dz` (`rows × d_model`).
pub fn adapter_backward(
    p: &[f64],
    grad: &mut [f64],
    ap: &AdapterParams,
    block: &ConditionBlock,
    cache: &AdapterCache,
    dz: &[f64],
) {
    let cfg = &ap.config;
    let t = block.rows();
    let d = cfg.d_model;
    let mut dx = vec![0.0; t * d];
    match ap.b_out {
        Some(b) => {
            let (dw, db) = nn::two_mut(grad, ap.w_out, b);
            nn::linear_backward(&cache.hidden, t, d, ap.w_out.of(p), d, dz, Some(&mut dx), dw, Some(db));
        }
        None => {
            nn::linear_backward(&cache.hidden, t, d, ap.w_out.of(p), d, dz, Some(&mut dx), ap.w_out.of_mut(grad), None)
        }
    }
    for (lp, c) in ap.layers.iter().zip(&cache.layers).rev() {
        dx = nn::layer_backward(p, grad, lp, cfg.shape(), c, &dx, t);
    }
    match ap.b_in {
        Some(b) => {
            let (dw, db) = nn::two_mut(grad, ap.w_in, b);
            nn::linear_backward(&block.data, t, cfg.input_dim, ap.w_in.of(p), d, &dx, None, dw, Some(db));
        }
        None => {
            nn::linear_backward(&block.data, t, cfg.input_dim, ap.w_in.of(p), d, &dx, None, ap.w_in.of_mut(grad), None)
        }
    }
}
