//! Dense transformer building blocks in f64 with hand-written backward passes.
//!
//! All parameters of a model live in one flat buffer; a [`Tensor`] is just a
//! view (offset and shape) into it. Gradients use the same layout, which keeps
//! the optimizer, checkpointing and finite-difference checks trivial.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.offset..self.offset + self.len()]
    }

    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.offset..self.offset + self.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Hands out consecutive regions of the flat parameter buffer.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Allocator {
    len: usize,
    inits: Vec<(Tensor, Init)>,
}

impl Allocator {
    pub fn tensor(&mut self, rows: usize, cols: usize, init: Init) -> Tensor {
        let t = Tensor { offset: self.len, rows, cols };
        self.len += t.len();
        self.inits.push((t, init));
        t
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn initialize<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut buf = vec![0.0; self.len];
        for &(t, init) in &self.inits {
            let dst = t.of_mut(&mut buf);
            match init {
                Init::Zeros => {}
                Init::Ones => dst.fill(1.0),
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("finite std");
                    for x in dst.iter_mut() {
                        *x = normal.sample(rng);
                    }
                }
            }
        }
        buf
    }
}

/// `y[t×n] = x[t×m] · w[m×n] + b`.
pub fn linear(x: &[f64], t: usize, m: usize, w: &[f64], b: Option<&[f64]>, n: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), t * m);
    debug_assert_eq!(w.len(), m * n);
    let mut y = vec![0.0; t * n];
    for i in 0..t {
        let yi = &mut y[i * n..(i + 1) * n];
        if let Some(b) = b {
            yi.copy_from_slice(b);
        }
        for k in 0..m {
            let xk = x[i * m + k];
            if xk == 0.0 {
                continue;
            }
            let wk = &w[k * n..(k + 1) * n];
            for (yj, wj) in yi.iter_mut().zip(wk) {
                *yj += xk * wj;
            }
        }
    }
    y
}

/// Accumulates the gradients of [`linear`] into `dx`, `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    t: usize,
    m: usize,
    w: &[f64],
    n: usize,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for i in 0..t {
            let dyi = &dy[i * n..(i + 1) * n];
            for k in 0..m {
                let wk = &w[k * n..(k + 1) * n];
                dx[i * m + k] += dot(dyi, wk);
            }
        }
    }
    for i in 0..t {
        let dyi = &dy[i * n..(i + 1) * n];
        for k in 0..m {
            let xk = x[i * m + k];
            if xk == 0.0 {
                continue;
            }
            let dwk = &mut dw[k * n..(k + 1) * n];
            for (d, g) in dwk.iter_mut().zip(dyi) {
                *d += xk * g;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..t {
            for (d, g) in db.iter_mut().zip(&dy[i * n..(i + 1) * n]) {
                *d += g;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], t: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    t: usize,
    d: usize,
    g: &[f64],
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
            dxhat[j] = dyi[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Multi-head scaled dot-product attention over a packed `[q | k | v]`
/// matrix of shape `t × 3d`. Returns the context (`t × d`) and the
/// attention probabilities (`heads × t × t`).
pub fn attention(qkv: &[f64], t: usize, d: usize, heads: usize, causal: bool) -> (Vec<f64>, Vec<f64>) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * d;
    let mut ctx = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..t {
            let q = &qkv[i * stride + qo..i * stride + qo + hd];
            let jmax = if causal { i + 1 } else { t };
            let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let mut max = f64::NEG_INFINITY;
            for j in 0..jmax {
                let s = dot(q, &qkv[j * stride + ko..j * stride + ko + hd]) * scale;
                p[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for pj in p.iter_mut().take(jmax) {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            let c = &mut ctx[i * d + h * hd..i * d + (h + 1) * hd];
            for j in 0..jmax {
                p[j] /= sum;
                let v = &qkv[j * stride + vo..j * stride + vo + hd];
                for (cv, vv) in c.iter_mut().zip(v) {
                    *cv += p[j] * vv;
                }
            }
        }
    }
    (ctx, probs)
}

pub fn attention_backward(
    dctx: &[f64],
    qkv: &[f64],
    probs: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> Vec<f64> {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * d;
    let mut dqkv = vec![0.0; t * stride];
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..t {
            let jmax = if causal { i + 1 } else { t };
            let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let dc = &dctx[i * d + h * hd..i * d + (h + 1) * hd];
            let mut acc = 0.0;
            for j in 0..jmax {
                let v = &qkv[j * stride + vo..j * stride + vo + hd];
                dp[j] = dot(dc, v);
                acc += dp[j] * p[j];
                let dv = &mut dqkv[j * stride + vo..j * stride + vo + hd];
                for (a, b) in dv.iter_mut().zip(dc) {
                    *a += p[j] * b;
                }
            }
            for j in 0..jmax {
                let ds = p[j] * (dp[j] - acc) * scale;
                if ds == 0.0 {
                    continue;
                }
                for x in 0..hd {
                    let qv = qkv[i * stride + qo + x];
                    let kv = qkv[j * stride + ko + x];
                    dqkv[i * stride + qo + x] += ds * kv;
                    dqkv[j * stride + ko + x] += ds * qv;
                }
            }
        }
    }
    dqkv
}

/// One pre-LN transformer layer: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub causal: bool,
}

impl LayerParams {
    /// `std` for ordinary weights, `residual_std` for the two projections
    /// that write back into the residual stream.
    pub fn alloc(a: &mut Allocator, d: usize, ffn: usize, std: f64, residual_std: f64) -> Self {
        LayerParams {
            ln1_g: a.tensor(1, d, Init::Ones),
            ln1_b: a.tensor(1, d, Init::Zeros),
            w_qkv: a.tensor(d, 3 * d, Init::Normal(std)),
            b_qkv: a.tensor(1, 3 * d, Init::Zeros),
            w_o: a.tensor(d, d, Init::Normal(residual_std)),
            b_o: a.tensor(1, d, Init::Zeros),
            ln2_g: a.tensor(1, d, Init::Ones),
            ln2_b: a.tensor(1, d, Init::Zeros),
            w_1: a.tensor(d, ffn, Init::Normal(std)),
            b_1: a.tensor(1, ffn, Init::Zeros),
            w_2: a.tensor(ffn, d, Init::Normal(residual_std)),
            b_2: a.tensor(1, d, Init::Zeros),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    ln1: LayerNormCache,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LayerNormCache,
    h2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

pub fn layer_forward(p: &[f64], lp: &LayerParams, shape: LayerShape, x: &[f64], t: usize) -> (Vec<f64>, LayerCache) {
    let LayerShape { d_model: d, heads, ffn_dim: f, causal } = shape;
    let (h1, ln1) = layer_norm(x, t, d, lp.ln1_g.of(p), lp.ln1_b.of(p));
    let qkv = linear(&h1, t, d, lp.w_qkv.of(p), Some(lp.b_qkv.of(p)), 3 * d);
    let (ctx, probs) = attention(&qkv, t, d, heads, causal);
    let attn_out = linear(&ctx, t, d, lp.w_o.of(p), Some(lp.b_o.of(p)), d);
    let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
    let (h2, ln2) = layer_norm(&x_mid, t, d, lp.ln2_g.of(p), lp.ln2_b.of(p));
    let pre = linear(&h2, t, d, lp.w_1.of(p), Some(lp.b_1.of(p)), f);
    let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let mlp_out = linear(&act, t, f, lp.w_2.of(p), Some(lp.b_2.of(p)), d);
    let y = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
    let cache = LayerCache { ln1, h1, qkv, probs, ctx, ln2, h2, pre, act };
    (y, cache)
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub fn layer_backward(
    p: &[f64],
    grad: &mut [f64],
    lp: &LayerParams,
    shape: LayerShape,
    cache: &LayerCache,
    dy: &[f64],
    t: usize,
) -> Vec<f64> {
    let LayerShape { d_model: d, heads, ffn_dim: f, causal } = shape;

    // MLP branch
    let mut dact = vec![0.0; t * f];
    {
        let (dw, db) = two_mut(grad, lp.w_2, lp.b_2);
        linear_backward(&cache.act, t, f, lp.w_2.of(p), d, dy, Some(&mut dact), dw, Some(db));
    }
    let dpre: Vec<f64> = dact.iter().zip(&cache.pre).map(|(g, &x)| g * gelu_grad(x)).collect();
    let mut dh2 = vec![0.0; t * d];
    {
        let (dw, db) = two_mut(grad, lp.w_1, lp.b_1);
        linear_backward(&cache.h2, t, d, lp.w_1.of(p), f, &dpre, Some(&mut dh2), dw, Some(db));
    }
    let mut dx_mid = dy.to_vec();
    {
        let (dg, db) = two_mut(grad, lp.ln2_g, lp.ln2_b);
        layer_norm_backward(&dh2, &cache.ln2, t, d, lp.ln2_g.of(p), &mut dx_mid, dg, db);
    }

    // attention branch
    let mut dctx = vec![0.0; t * d];
    {
        let (dw, db) = two_mut(grad, lp.w_o, lp.b_o);
        linear_backward(&cache.ctx, t, d, lp.w_o.of(p), d, &dx_mid, Some(&mut dctx), dw, Some(db));
    }
    let dqkv = attention_backward(&dctx, &cache.qkv, &cache.probs, t, d, heads, causal);
    let mut dh1 = vec![0.0; t * d];
    {
        let (dw, db) = two_mut(grad, lp.w_qkv, lp.b_qkv);
        linear_backward(&cache.h1, t, d, lp.w_qkv.of(p), 3 * d, &dqkv, Some(&mut dh1), dw, Some(db));
    }
    let mut dx = dx_mid;
    {
        let (dg, db) = two_mut(grad, lp.ln1_g, lp.ln1_b);
        layer_norm_backward(&dh1, &cache.ln1, t, d, lp.ln1_g.of(p), &mut dx, dg, db);
    }
    dx
}

/// Disjoint mutable views of two tensors; `a` must precede `b` in the buffer.
pub fn two_mut(buf: &mut [f64], a: Tensor, b: Tensor) -> (&mut [f64], &mut [f64]) {
    assert!(a.offset + a.len() <= b.offset, "tensors overlap or are out of order");
    let (lo, hi) = buf.split_at_mut(b.offset);
    (&mut lo[a.offset..a.offset + a.len()], &mut hi[..b.len()])
}

/// Sum of per-row cross-entropy over rows with a target, and the unscaled
/// gradient `softmax − onehot` (zero on rows without a target).
pub fn masked_cross_entropy(logits: &[f64], v: usize, targets: &[Option<u32>]) -> (f64, usize, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut count = 0;
    for (i, target) in targets.iter().enumerate() {
        let Some(target) = *target else { continue };
        let row = &logits[i * v..(i + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[target as usize];
        count += 1;
        let g = &mut grad[i * v..(i + 1) * v];
        for (gj, x) in g.iter_mut().zip(row) {
            *gj = (x - lse).exp();
        }
        g[target as usize] -= 1.0;
    }
    (total, count, grad)
}
