//! Decoder-only transformer over interleaved condition/target streams.
//!
//! Condition blocks go through the adapter and their outputs occupy stream
//! positions directly; token slots use a learned embedding. Both get a learned
//! absolute position embedding, then a causal pre-LN stack and a linear head.

mod checkpoint;
mod generate;
mod train;

pub use checkpoint::{config_hash, ModelCheckpoint, Stage, FORMAT_VERSION};
pub use generate::{generate, GenerationConfig};
pub use train::{finetune_loss, train, AdamState, Corpus, StepRecord, TrainConfig, TrainMode, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Slot, TrainingSegment};
use crate::encoder::{adapter_backward, adapter_forward, AdapterCache, AdapterParams, ConditionBlock, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Allocator, Init, LayerCache, LayerParams, LayerShape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Only 0.0 is supported.
    pub dropout: f64,
    pub max_positions: usize,
    pub init_std: f64,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, 4 heads, width 128.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 512,
            dropout: 0.0,
            max_positions: 1024,
            init_std: 0.02,
            encoder: EncoderConfig { d_model: 128, ..EncoderConfig::default() },
        }
    }

    /// The 8-layer, 8-head decoder shape.
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig { n_layers: 8, n_heads: 8, ..Self::desk(vocab_size) }
    }

    /// Tiny model for gradient checks and smoke tests.
    pub fn toy(vocab_size: usize, input_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            max_positions: 256,
            init_std: 0.1,
            encoder: EncoderConfig { input_dim, d_model: 16, layers: 1, heads: 2, ffn_dim: 32, bias: true },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.ffn_dim == 0
            || self.max_positions == 0
        {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.dropout != 0.0 {
            return Err(Error::invalid("dropout is not supported; set it to 0"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::invalid("init_std must be positive"));
        }
        if self.encoder.d_model != self.d_model {
            return Err(Error::invalid("adapter width must equal the decoder width"));
        }
        self.encoder.validate()
    }

    fn shape(&self) -> LayerShape {
        LayerShape { d_model: self.d_model, heads: self.n_heads, ffn_dim: self.ffn_dim, causal: true }
    }
}

/// Where every tensor lives in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub adapter: AdapterParams,
    allocator: Allocator,
}

impl ModelLayout {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut a = Allocator::default();
        let std = cfg.init_std;
        let residual_std = std / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let d = cfg.d_model;
        let tok_emb = a.tensor(cfg.vocab_size, d, Init::Normal(std));
        let pos_emb = a.tensor(cfg.max_positions, d, Init::Normal(std));
        let layers = (0..cfg.n_layers).map(|_| LayerParams::alloc(&mut a, d, cfg.ffn_dim, std, residual_std)).collect();
        let lnf_g = a.tensor(1, d, Init::Ones);
        let lnf_b = a.tensor(1, d, Init::Zeros);
        let head_w = a.tensor(d, cfg.vocab_size, Init::Normal(std));
        let head_b = a.tensor(1, cfg.vocab_size, Init::Zeros);
        let adapter = AdapterParams::alloc(&mut a, cfg.encoder, std)?;
        Ok(ModelLayout { tok_emb, pos_emb, layers, lnf_g, lnf_b, head_w, head_b, adapter, allocator: a })
    }

    pub fn param_count(&self) -> usize {
        self.allocator.len()
    }

    /// Offset of the first adapter parameter; everything after it belongs to the adapter.
    pub fn adapter_offset(&self) -> usize {
        self.adapter.w_in.offset
    }
}

/// Decoder plus adapter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: Vec<f64>,
}

struct ForwardCache {
    x0_len: usize,
    adapters: Vec<AdapterCache>,
    layers: Vec<LayerCache>,
    lnf: nn::LayerNormCache,
    hidden: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let layout = ModelLayout::new(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout.allocator.initialize(&mut rng);
        Ok(Model { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let layout = ModelLayout::new(&config)?;
        if params.len() != layout.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters given, config needs {}",
                params.len(),
                layout.param_count()
            )));
        }
        Ok(Model { config, layout, params })
    }

    fn check_input(&self, slots: &[Slot], blocks: &[ConditionBlock]) -> Result<()> {
        if slots.is_empty() {
            return Err(Error::invalid("empty input"));
        }
        if slots.len() > self.config.max_positions {
            return Err(Error::Shape(format!(
                "{} slots exceed max_positions {}",
                slots.len(),
                self.config.max_positions
            )));
        }
        for s in slots {
            match *s {
                Slot::Token(id) if id as usize >= self.config.vocab_size => {
                    return Err(Error::Shape(format!("token id {id} outside vocabulary")))
                }
                Slot::Condition { block, row } if block >= blocks.len() || row >= blocks[block].rows() => {
                    return Err(Error::Shape(format!("condition slot ({block},{row}) has no embedding")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn forward_cached(&self, p: &[f64], slots: &[Slot], blocks: &[ConditionBlock]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(slots, blocks)?;
        let l = &self.layout;
        let d = self.config.d_model;
        let t = slots.len();
        let mut adapters = Vec::with_capacity(blocks.len());
        let mut z = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (out, cache) = adapter_forward(p, &l.adapter, b)?;
            z.push(out);
            adapters.push(cache);
        }
        let tok = l.tok_emb.of(p);
        let pos = l.pos_emb.of(p);
        let mut x = vec![0.0; t * d];
        for (i, s) in slots.iter().enumerate() {
            let src = match *s {
                Slot::Token(id) => &tok[id as usize * d..(id as usize + 1) * d],
                Slot::Condition { block, row } => &z[block][row * d..(row + 1) * d],
            };
            for j in 0..d {
                x[i * d + j] = src[j] + pos[i * d + j];
            }
        }
        let mut layers = Vec::with_capacity(l.layers.len());
        for lp in &l.layers {
            let (y, c) = nn::layer_forward(p, lp, self.config.shape(), &x, t);
            layers.push(c);
            x = y;
        }
        let (hidden, lnf) = nn::layer_norm(&x, t, d, l.lnf_g.of(p), l.lnf_b.of(p));
        let logits = nn::linear(&hidden, t, d, l.head_w.of(p), Some(l.head_b.of(p)), self.config.vocab_size);
        Ok((logits, ForwardCache { x0_len: t, adapters, layers, lnf, hidden }))
    }

    /// Logits (`slots × vocab_size`, row-major) at every position.
    pub fn forward(&self, slots: &[Slot], blocks: &[ConditionBlock]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(&self.params, slots, blocks)?.0)
    }

    pub fn forward_segment(&self, seg: &TrainingSegment) -> Result<Vec<f64>> {
        self.forward(&seg.slots, &seg.blocks)
    }

    fn backward(
        &self,
        p: &[f64],
        slots: &[Slot],
        blocks: &[ConditionBlock],
        cache: &ForwardCache,
        dlogits: &[f64],
        grad: &mut [f64],
    ) {
        let l = &self.layout;
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let t = cache.x0_len;
        let mut dhidden = vec![0.0; t * d];
        {
            let (dw, db) = nn::two_mut(grad, l.head_w, l.head_b);
            nn::linear_backward(&cache.hidden, t, d, l.head_w.of(p), v, dlogits, Some(&mut dhidden), dw, Some(db));
        }
        let mut dx = vec![0.0; t * d];
        {
            let (dg, db) = nn::two_mut(grad, l.lnf_g, l.lnf_b);
            nn::layer_norm_backward(&dhidden, &cache.lnf, t, d, l.lnf_g.of(p), &mut dx, dg, db);
        }
        for (lp, c) in l.layers.iter().zip(&cache.layers).rev() {
            dx = nn::layer_backward(p, grad, lp, self.config.shape(), c, &dx, t);
        }
        let mut dz: Vec<Vec<f64>> = blocks.iter().map(|b| vec![0.0; b.rows() * d]).collect();
        {
            let dpos = l.pos_emb.of_mut(grad);
            for (a, b) in dpos[..t * d].iter_mut().zip(&dx) {
                *a += b;
            }
        }
        let dtok = l.tok_emb.of_mut(grad);
        for (i, s) in slots.iter().enumerate() {
            let g = &dx[i * d..(i + 1) * d];
            let dst = match *s {
                Slot::Token(id) => &mut dtok[id as usize * d..(id as usize + 1) * d],
                Slot::Condition { block, row } => &mut dz[block][row * d..(row + 1) * d],
            };
            for (a, b) in dst.iter_mut().zip(g) {
                *a += b;
            }
        }
        for ((b, c), g) in blocks.iter().zip(&cache.adapters).zip(&dz) {
            adapter_backward(p, grad, &l.adapter, b, c, g);
        }
    }

    /// Summed next-token NLL over the masked positions, their count, and the
    /// parameter gradient of `scale × summed NLL`.
    pub fn loss_and_grad(&self, seg: &TrainingSegment, scale: f64) -> Result<(f64, usize, Vec<f64>)> {
        self.loss_and_grad_at(&self.params, seg, scale)
    }

    pub(crate) fn loss_and_grad_at(
        &self,
        p: &[f64],
        seg: &TrainingSegment,
        scale: f64,
    ) -> Result<(f64, usize, Vec<f64>)> {
        let (logits, cache) = self.forward_cached(p, &seg.slots, &seg.blocks)?;
        let (nll, count, mut dlogits) = nn::masked_cross_entropy(&logits, self.config.vocab_size, &seg.targets());
        for g in dlogits.iter_mut() {
            *g *= scale;
        }
        let mut grad = vec![0.0; p.len()];
        self.backward(p, &seg.slots, &seg.blocks, &cache, &dlogits, &mut grad);
        Ok((nll, count, grad))
    }

    /// Gradient of an arbitrary linear probe `Σ w·logits`; used by gradient checks.
    pub fn probe_grad(&self, seg: &TrainingSegment, dlogits: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.forward_cached(&self.params, &seg.slots, &seg.blocks)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&self.params, &seg.slots, &seg.blocks, &cache, dlogits, &mut grad);
        Ok(grad)
    }

    /// Mean masked cross-entropy of one segment.
    pub fn segment_loss(&self, seg: &TrainingSegment) -> Result<f64> {
        let logits = self.forward_segment(seg)?;
        loss(&logits, self.config.vocab_size, &seg.targets())
    }
}

/// Mean negative log-likelihood over positions with a target.
pub fn loss(logits: &[f64], vocab_size: usize, targets: &[Option<u32>]) -> Result<f64> {
    if logits.len() != targets.len() * vocab_size {
        return Err(Error::Shape(format!(
            "{} logits for {} positions of vocabulary {vocab_size}",
            logits.len(),
            targets.len()
        )));
    }
    let (total, count, _) = nn::masked_cross_entropy(logits, vocab_size, targets);
    if count == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    Ok(total / count as f64)
}

/// Gradient of [`loss`] with respect to the logits.
pub fn loss_grad(logits: &[f64], vocab_size: usize, targets: &[Option<u32>]) -> Result<Vec<f64>> {
    let (_, count, mut g) = nn::masked_cross_entropy(logits, vocab_size, targets);
    if count == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    for x in g.iter_mut() {
        *x /= count as f64;
    }
    Ok(g)
}
