//! Small pre-LayerNorm transformer encoder with a causal mask and a direct
//! multi-horizon head. Forward and backward passes are written out by hand
//! over flat row-major buffers.

use std::f64::consts::PI;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TransformerParams {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            context_len: 28,
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

/// A parameter block inside the flat weight vector (row-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBlocks {
    pub ln1_g: Block,
    pub ln1_b: Block,
    pub wq: Block,
    pub bq: Block,
    pub wk: Block,
    pub bk: Block,
    pub wv: Block,
    pub bv: Block,
    pub wo: Block,
    pub bo: Block,
    pub ln2_g: Block,
    pub ln2_b: Block,
    pub w1: Block,
    pub b1: Block,
    pub w2: Block,
    pub b2: Block,
}

impl LayerBlocks {
    fn named(&self) -> [(&'static str, Block); 16] {
        [
            ("ln1_g", self.ln1_g),
            ("ln1_b", self.ln1_b),
            ("wq", self.wq),
            ("bq", self.bq),
            ("wk", self.wk),
            ("bk", self.bk),
            ("wv", self.wv),
            ("bv", self.bv),
            ("wo", self.wo),
            ("bo", self.bo),
            ("ln2_g", self.ln2_g),
            ("ln2_b", self.ln2_b),
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_inputs: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub w_in: Block,
    pub b_in: Block,
    pub layers: Vec<LayerBlocks>,
    pub lnf_g: Block,
    pub lnf_b: Block,
    pub w_head: Block,
    pub b_head: Block,
    pub total: usize,
}

impl Layout {
    pub fn new(p: &TransformerParams, n_inputs: usize, horizon: usize) -> Result<Self> {
        if p.d_model == 0 || p.n_heads == 0 || p.d_model % p.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                p.d_model, p.n_heads
            )));
        }
        if n_inputs == 0 || horizon == 0 || p.context_len == 0 || p.d_ff == 0 {
            return Err(Error::invalid("transformer dimensions must be positive"));
        }
        let mut next = 0;
        let mut block = |rows: usize, cols: usize| {
            let b = Block { offset: next, rows, cols };
            next += rows * cols;
            b
        };
        let (d, f) = (p.d_model, p.d_ff);
        let w_in = block(n_inputs, d);
        let b_in = block(1, d);
        let layers = (0..p.n_layers)
            .map(|_| LayerBlocks {
                ln1_g: block(1, d),
                ln1_b: block(1, d),
                wq: block(d, d),
                bq: block(1, d),
                wk: block(d, d),
                bk: block(1, d),
                wv: block(d, d),
                bv: block(1, d),
                wo: block(d, d),
                bo: block(1, d),
                ln2_g: block(1, d),
                ln2_b: block(1, d),
                w1: block(d, f),
                b1: block(1, f),
                w2: block(f, d),
                b2: block(1, d),
            })
            .collect();
        let lnf_g = block(1, d);
        let lnf_b = block(1, d);
        let w_head = block(d, horizon);
        let b_head = block(1, horizon);
        Ok(Self {
            n_inputs,
            horizon,
            d_model: d,
            n_heads: p.n_heads,
            d_ff: f,
            context_len: p.context_len,
            w_in,
            b_in,
            layers,
            lnf_g,
            lnf_b,
            w_head,
            b_head,
            total: next,
        })
    }

    /// Every parameter block with a readable name, in storage order.
    pub fn blocks(&self) -> Vec<(String, Block)> {
        let mut out = vec![("w_in".to_string(), self.w_in), ("b_in".to_string(), self.b_in)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, b)| (format!("layer{l}.{n}"), b)));
        }
        out.extend([
            ("lnf_g".to_string(), self.lnf_g),
            ("lnf_b".to_string(), self.lnf_b),
            ("w_head".to_string(), self.w_head),
            ("b_head".to_string(), self.b_head),
        ]);
        out
    }

    /// Random initial weights: fan-in scaled normals, unit LayerNorm gains,
    /// zero biases. Residual-branch outputs are damped by the depth.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut w = vec![0.0; self.total];
        let depth_scale = 1.0 / (2.0 * self.layers.len().max(1) as f64).sqrt();
        let mut fill = |w: &mut [f64], b: Block, scale: f64| {
            let normal = Normal::new(0.0, scale / (b.rows as f64).sqrt()).expect("positive scale");
            for v in &mut w[b.range()] {
                *v = normal.sample(rng);
            }
        };
        fill(&mut w, self.w_in, 1.0);
        for layer in &self.layers {
            fill(&mut w, layer.wq, 1.0);
            fill(&mut w, layer.wk, 1.0);
            fill(&mut w, layer.wv, 1.0);
            fill(&mut w, layer.wo, depth_scale);
            fill(&mut w, layer.w1, 1.0);
            fill(&mut w, layer.w2, depth_scale);
            w[layer.ln1_g.range()].fill(1.0);
            w[layer.ln2_g.range()].fill(1.0);
        }
        fill(&mut w, self.w_head, 0.1);
        w[self.lnf_g.range()].fill(1.0);
        w
    }
}

/// One training example: `context_len` rows of `n_inputs` features and the
/// next `horizon` target values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            pe[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn linear(x: &[f64], n: usize, w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        let row = &mut y[i * dout..(i + 1) * dout];
        row.copy_from_slice(b);
        for k in 0..din {
            let xv = x[i * din + k];
            if xv == 0.0 {
                continue;
            }
            for (r, wv) in row.iter_mut().zip(&w[k * dout..(k + 1) * dout]) {
                *r += xv * wv;
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    w: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * din];
    for i in 0..n {
        let dyr = &dy[i * dout..(i + 1) * dout];
        for (acc, g) in db.iter_mut().zip(dyr) {
            *acc += g;
        }
        for k in 0..din {
            let xv = x[i * din + k];
            let wr = &w[k * dout..(k + 1) * dout];
            let dwr = &mut dw[k * dout..(k + 1) * dout];
            let mut s = 0.0;
            for o in 0..dout {
                dwr[o] += xv * dyr[o];
                s += wr[o] * dyr[o];
            }
            dx[i * din + k] = s;
        }
    }
    dx
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
}

fn layer_norm(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> LnCache {
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = g[j] * h + b[j];
        }
    }
    LnCache { xhat, rstd, out }
}

fn layer_norm_backward(c: &LnCache, dy: &[f64], g: &[f64], n: usize, d: usize, dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let idx = i * d + j;
            dg[j] += dy[idx] * c.xhat[idx];
            db[j] += dy[idx];
            dxhat[j] = dy[idx] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * c.xhat[idx];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let idx = i * d + j;
            dx[idx] = c.rstd[i] * (dxhat[j] - mean_dxhat - c.xhat[idx] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `n_heads × L × L`; entries above the diagonal stay zero.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    input: Vec<f64>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

struct Net<'a> {
    layout: &'a Layout,
    w: &'a [f64],
    pe: &'a [f64],
}

impl Net<'_> {
    fn p(&self, b: Block) -> &[f64] {
        &self.w[b.range()]
    }

    fn attention(&self, q: &[f64], k: &[f64], v: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
        let (d, h) = (self.layout.d_model, self.layout.n_heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; h * len * len];
        let mut ctx = vec![0.0; len * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..len {
                let p = &mut probs[(head * len + i) * len..(head * len + i + 1) * len];
                let qi = &q[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pj in p.iter_mut().take(i + 1) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for j in 0..=i {
                    p[j] /= z;
                    let vj = &v[j * d + off..j * d + off + dh];
                    let c = &mut ctx[i * d + off..i * d + off + dh];
                    for (cv, vv) in c.iter_mut().zip(vj) {
                        *cv += p[j] * vv;
                    }
                }
            }
        }
        (ctx, probs)
    }

    fn forward(&self, inputs: &[f64]) -> Cache {
        let lay = self.layout;
        let (len, d, f) = (lay.context_len, lay.d_model, lay.d_ff);
        let mut x = linear(inputs, len, self.p(lay.w_in), self.p(lay.b_in), lay.n_inputs, d);
        for (xv, pv) in x.iter_mut().zip(self.pe) {
            *xv += pv;
        }
        let mut layers = Vec::with_capacity(lay.layers.len());
        for lb in &lay.layers {
            let x_in = x;
            let ln1 = layer_norm(&x_in, len, d, self.p(lb.ln1_g), self.p(lb.ln1_b));
            let q = linear(&ln1.out, len, self.p(lb.wq), self.p(lb.bq), d, d);
            let k = linear(&ln1.out, len, self.p(lb.wk), self.p(lb.bk), d, d);
            let v = linear(&ln1.out, len, self.p(lb.wv), self.p(lb.bv), d, d);
            let (ctx, probs) = self.attention(&q, &k, &v, len);
            let attn = linear(&ctx, len, self.p(lb.wo), self.p(lb.bo), d, d);
            let x_mid: Vec<f64> = x_in.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let ln2 = layer_norm(&x_mid, len, d, self.p(lb.ln2_g), self.p(lb.ln2_b));
            let pre = linear(&ln2.out, len, self.p(lb.w1), self.p(lb.b1), d, f);
            let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
            let ff = linear(&act, len, self.p(lb.w2), self.p(lb.b2), f, d);
            x = x_mid.iter().zip(&ff).map(|(a, b)| a + b).collect();
            layers.push(LayerCache {
                x_in,
                ln1,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                pre,
                act,
            });
        }
        let lnf = layer_norm(&x, len, d, self.p(lay.lnf_g), self.p(lay.lnf_b));
        Cache {
            input: inputs.to_vec(),
            layers,
            lnf,
        }
    }

    /// Head output for the given position of a forward pass.
    fn head(&self, cache: &Cache, pos: usize) -> Vec<f64> {
        let lay = self.layout;
        let d = lay.d_model;
        linear(
            &cache.lnf.out[pos * d..(pos + 1) * d],
            1,
            self.p(lay.w_head),
            self.p(lay.b_head),
            d,
            lay.horizon,
        )
    }

    /// Backpropagates `dout` (gradient w.r.t. the last position's head
    /// output) and accumulates into `grad`.
    fn backward(&self, cache: &Cache, dout: &[f64], grad: &mut [f64]) {
        let lay = self.layout;
        let (len, d, f, h) = (lay.context_len, lay.d_model, lay.d_ff, lay.n_heads);
        let last = len - 1;

        let mut dlnf = vec![0.0; len * d];
        {
            let (dw, db) = split_pair(grad, lay.w_head, lay.b_head);
            let dx = linear_backward(
                &cache.lnf.out[last * d..(last + 1) * d],
                dout,
                self.p(lay.w_head),
                1,
                d,
                lay.horizon,
                dw,
                db,
            );
            dlnf[last * d..].copy_from_slice(&dx);
        }
        let mut dx = {
            let (dg, db) = split_pair(grad, lay.lnf_g, lay.lnf_b);
            layer_norm_backward(&cache.lnf, &dlnf, self.p(lay.lnf_g), len, d, dg, db)
        };

        for (lb, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // feed-forward branch: x_out = x_mid + W2 gelu(W1 ln2(x_mid))
            let dact = {
                let (dw, db) = split_pair(grad, lb.w2, lb.b2);
                linear_backward(&lc.act, &dx, self.p(lb.w2), len, f, d, dw, db)
            };
            let dpre: Vec<f64> = dact.iter().zip(&lc.pre).map(|(g, &u)| g * gelu_grad(u)).collect();
            let dln2 = {
                let (dw, db) = split_pair(grad, lb.w1, lb.b1);
                linear_backward(&lc.ln2.out, &dpre, self.p(lb.w1), len, d, f, dw, db)
            };
            let dmid_ff = {
                let (dg, db) = split_pair(grad, lb.ln2_g, lb.ln2_b);
                layer_norm_backward(&lc.ln2, &dln2, self.p(lb.ln2_g), len, d, dg, db)
            };
            let dmid: Vec<f64> = dx.iter().zip(&dmid_ff).map(|(a, b)| a + b).collect();

            // attention branch: x_mid = x_in + Wo attn(ln1(x_in))
            let dctx = {
                let (dw, db) = split_pair(grad, lb.wo, lb.bo);
                linear_backward(&lc.ctx, &dmid, self.p(lb.wo), len, d, d, dw, db)
            };
            let (dq, dk, dv) = attention_backward(lc, &dctx, len, d, h);
            let mut dln1 = vec![0.0; len * d];
            for (wb, bb, dproj) in [(lb.wq, lb.bq, &dq), (lb.wk, lb.bk, &dk), (lb.wv, lb.bv, &dv)] {
                let (dw, db) = split_pair(grad, wb, bb);
                let part = linear_backward(&lc.ln1.out, dproj, self.p(wb), len, d, d, dw, db);
                for (a, b) in dln1.iter_mut().zip(&part) {
                    *a += b;
                }
            }
            let din_attn = {
                let (dg, db) = split_pair(grad, lb.ln1_g, lb.ln1_b);
                layer_norm_backward(&lc.ln1, &dln1, self.p(lb.ln1_g), len, d, dg, db)
            };
            dx = dmid.iter().zip(&din_attn).map(|(a, b)| a + b).collect();
            debug_assert_eq!(lc.x_in.len(), dx.len());
        }

        let (dw, db) = split_pair(grad, lay.w_in, lay.b_in);
        linear_backward(&cache.input, &dx, self.p(lay.w_in), len, lay.n_inputs, d, dw, db);
    }

    /// Squared error summed over the horizon.
    fn window_loss(&self, win: &Window) -> f64 {
        let cache = self.forward(&win.inputs);
        let out = self.head(&cache, self.layout.context_len - 1);
        out.iter().zip(&win.targets).map(|(o, t)| (o - t) * (o - t)).sum()
    }
}

fn attention_backward(lc: &LayerCache, dctx: &[f64], len: usize, d: usize, h: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; len * d];
    let mut dk = vec![0.0; len * d];
    let mut dv = vec![0.0; len * d];
    let mut dp = vec![0.0; len];
    for head in 0..h {
        let off = head * dh;
        for i in 0..len {
            let p = &lc.probs[(head * len + i) * len..(head * len + i + 1) * len];
            let dci = &dctx[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &lc.v[j * d + off..j * d + off + dh];
                dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (g, c) in dvj.iter_mut().zip(dci) {
                    *g += p[j] * c;
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    dq[i * d + off + t] += ds * lc.k[j * d + off + t];
                    dk[j * d + off + t] += ds * lc.q[i * d + off + t];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Disjoint mutable views of a weight block and its bias block.
fn split_pair(grad: &mut [f64], w: Block, b: Block) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(w.offset + w.len(), b.offset);
    let (head, tail) = grad[w.offset..].split_at_mut(w.len());
    (head, &mut tail[..b.len()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel {
    pub params: TransformerParams,
    pub layout: Layout,
    pub weights: Vec<f64>,
    /// Mean per-window training loss of each epoch.
    pub loss_history: Vec<f64>,
    /// `actual - predicted` at the final horizon step on the training windows.
    pub residuals: Vec<f64>,
    pub seed: u64,
}

impl TransformerModel {
    /// Untrained model with freshly initialised weights.
    pub fn init(params: &TransformerParams, n_inputs: usize, horizon: usize, seed: u64) -> Result<Self> {
        let layout = Layout::new(params, n_inputs, horizon)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = layout.init(&mut rng);
        Ok(Self {
            params: *params,
            layout,
            weights,
            loss_history: Vec::new(),
            residuals: Vec::new(),
            seed,
        })
    }

    pub fn fit(windows: &[Window], n_inputs: usize, horizon: usize, params: &TransformerParams, seed: u64) -> Result<Self> {
        if params.context_len < horizon {
            return Err(Error::invalid(format!(
                "context length {} is shorter than the horizon {horizon}",
                params.context_len
            )));
        }
        if windows.len() < 32 {
            return Err(Error::invalid(format!("need at least 32 training windows, have {}", windows.len())));
        }
        if params.batch_size == 0 || params.epochs == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        let mut model = Self::init(params, n_inputs, horizon, seed)?;
        for w in windows {
            model.check_window(w)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
        let pe = positional_encoding(params.context_len, params.d_model);
        let total = model.layout.total;
        let mut m = vec![0.0; total];
        let mut v = vec![0.0; total];
        let steps_per_epoch = windows.len().div_ceil(params.batch_size);
        let total_steps = (params.epochs * steps_per_epoch) as f64;
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut step = 0usize;

        for epoch in 0..params.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for (b, batch) in order.chunks(params.batch_size).enumerate() {
                let net = Net {
                    layout: &model.layout,
                    w: &model.weights,
                    pe: &pe,
                };
                let norm = 1.0 / (batch.len() * horizon) as f64;
                let parts: Vec<(f64, Vec<f64>)> = batch
                    .par_iter()
                    .map(|&i| {
                        let win = &windows[i];
                        let cache = net.forward(&win.inputs);
                        let out = net.head(&cache, params.context_len - 1);
                        let mut loss = 0.0;
                        let dout: Vec<f64> = out
                            .iter()
                            .zip(&win.targets)
                            .map(|(o, t)| {
                                loss += (o - t) * (o - t);
                                2.0 * (o - t) * norm
                            })
                            .collect();
                        let mut g = vec![0.0; total];
                        net.backward(&cache, &dout, &mut g);
                        (loss, g)
                    })
                    .collect();
                let mut grad = vec![0.0; total];
                let mut batch_loss = 0.0;
                for (loss, g) in &parts {
                    batch_loss += loss;
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "transformer loss is not finite (lr {}, epoch {}, batch {b})",
                        params.lr,
                        epoch + 1
                    )));
                }
                epoch_loss += batch_loss / horizon as f64;

                step += 1;
                let lr = params.lr * 0.5 * (1.0 + (PI * (step - 1) as f64 / total_steps).cos());
                let c1 = 1.0 - ADAM_B1.powi(step as i32);
                let c2 = 1.0 - ADAM_B2.powi(step as i32);
                for i in 0..total {
                    m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * grad[i];
                    v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * grad[i] * grad[i];
                    model.weights[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
                if model.weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "transformer weights became non-finite (lr {}, epoch {}, batch {b})",
                        params.lr,
                        epoch + 1
                    )));
                }
            }
            model.loss_history.push(epoch_loss / windows.len() as f64);
        }

        model.residuals = windows
            .par_iter()
            .map(|w| w.targets[horizon - 1] - model.predict(&w.inputs)[horizon - 1])
            .collect();
        Ok(model)
    }

    fn check_window(&self, w: &Window) -> Result<()> {
        let lay = &self.layout;
        if w.inputs.len() != lay.context_len * lay.n_inputs {
            return Err(Error::dim(lay.context_len * lay.n_inputs, w.inputs.len()));
        }
        if !w.targets.is_empty() && w.targets.len() != lay.horizon {
            return Err(Error::dim(lay.horizon, w.targets.len()));
        }
        Ok(())
    }

    fn net<'a>(&'a self, pe: &'a [f64]) -> Net<'a> {
        Net {
            layout: &self.layout,
            w: &self.weights,
            pe,
        }
    }

    /// Point forecasts for steps `1..=horizon` after the window's last day.
    pub fn predict(&self, inputs: &[f64]) -> Vec<f64> {
        let pe = positional_encoding(self.layout.context_len, self.layout.d_model);
        let net = self.net(&pe);
        let cache = net.forward(inputs);
        net.head(&cache, self.layout.context_len - 1)
    }

    /// Head output at every position of the window.
    pub fn predict_positions(&self, inputs: &[f64]) -> Vec<Vec<f64>> {
        let pe = positional_encoding(self.layout.context_len, self.layout.d_model);
        let net = self.net(&pe);
        let cache = net.forward(inputs);
        (0..self.layout.context_len).map(|p| net.head(&cache, p)).collect()
    }

    /// Mean squared error over a batch, as minimised during training.
    pub fn loss(&self, windows: &[Window]) -> f64 {
        let pe = positional_encoding(self.layout.context_len, self.layout.d_model);
        let net = self.net(&pe);
        let sum: f64 = windows.iter().map(|w| net.window_loss(w)).sum();
        sum / (windows.len() * self.layout.horizon) as f64
    }

    /// Analytic gradient of [`TransformerModel::loss`].
    pub fn loss_gradient(&self, windows: &[Window]) -> Vec<f64> {
        let pe = positional_encoding(self.layout.context_len, self.layout.d_model);
        let net = self.net(&pe);
        let norm = 1.0 / (windows.len() * self.layout.horizon) as f64;
        let mut grad = vec![0.0; self.layout.total];
        for w in windows {
            let cache = net.forward(&w.inputs);
            let out = net.head(&cache, self.layout.context_len - 1);
            let dout: Vec<f64> = out.iter().zip(&w.targets).map(|(o, t)| 2.0 * (o - t) * norm).collect();
            net.backward(&cache, &dout, &mut grad);
        }
        grad
    }

    /// Residual-bootstrap draws around a point forecast.
    pub fn draws(&self, point: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        if self.residuals.is_empty() {
            return vec![point; n];
        }
        (0..n)
            .map(|_| point + self.residuals[rng.random_range(0..self.residuals.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerParams {
        TransformerParams {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            context_len: 5,
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
        }
    }

    fn window(rng: &mut ChaCha8Rng, p: &TransformerParams, n_inputs: usize, horizon: usize) -> Window {
        Window {
            inputs: (0..p.context_len * n_inputs).map(|_| rng.random::<f64>()).collect(),
            targets: (0..horizon).map(|_| rng.random::<f64>()).collect(),
        }
    }

    #[test]
    fn layout_blocks_tile_the_weight_vector() {
        let layout = Layout::new(&tiny(), 3, 2).unwrap();
        let mut next = 0;
        for (_, b) in layout.blocks() {
            assert_eq!(b.offset, next);
            next += b.len();
        }
        assert_eq!(next, layout.total);
    }

    #[test]
    fn heads_must_divide_model_width() {
        let p = TransformerParams { n_heads: 3, ..tiny() };
        assert!(Layout::new(&p, 1, 1).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = TransformerModel::init(&p, 3, 2, 7).unwrap();
        let wins: Vec<Window> = (0..3).map(|_| window(&mut rng, &p, 3, 2)).collect();
        let grad = model.loss_gradient(&wins);
        let h = 1e-4;
        for (name, block) in model.layout.blocks() {
            let (mut diff, mut norm) = (0.0, 0.0);
            for i in block.range() {
                let mut m = model.clone();
                m.weights[i] += h;
                let up = m.loss(&wins);
                m.weights[i] -= 2.0 * h;
                let down = m.loss(&wins);
                let fd = (up - down) / (2.0 * h);
                diff += (fd - grad[i]).powi(2);
                norm += fd.abs().max(grad[i].abs()).powi(2);
            }
            let rel = diff.sqrt() / norm.sqrt().max(1e-12);
            assert!(rel < 1e-5, "{name}: relative error {rel}");
        }
    }

    #[test]
    fn later_inputs_do_not_reach_earlier_positions() {
        let p = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = TransformerModel::init(&p, 2, 1, 3).unwrap();
        let a = window(&mut rng, &p, 2, 1);
        let mut b = a.clone();
        for v in &mut b.inputs[3 * 2..] {
            *v += 10.0;
        }
        let pa = model.predict_positions(&a.inputs);
        let pb = model.predict_positions(&b.inputs);
        assert_eq!(pa[..3], pb[..3]);
        assert_ne!(pa[4], pb[4]);
    }
}
