//! Transformer building blocks with explicit forward caches and
//! hand-derived backward passes. Everything is row-major `(tokens, features)`
//! in double precision.

use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Dense layer `y = x W + b`, with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            weight: Array2::zeros((d_in, d_out)),
            bias: bias.then(|| Array1::zeros(d_out)),
        }
    }

    /// Normal init with standard deviation `1 / sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
        Linear {
            weight: Array2::from_shape_simple_fn((d_in, d_out), || normal.sample(rng)),
            bias: bias.then(|| Array1::zeros(d_out)),
        }
    }

    /// Haar-random (semi-)orthogonal weight, zero bias. Preserves norms
    /// when `d_in <= d_out` and inner products within the column space
    /// otherwise.
    pub fn init_orthogonal<R: Rng>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let (tall, wide) = (d_in.max(d_out), d_in.min(d_out));
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let g = nalgebra::DMatrix::<f64>::from_fn(tall, wide, |_, _| normal.sample(rng));
        let qr = g.qr();
        let (q, r) = (qr.q(), qr.r());
        let weight = Array2::from_shape_fn((d_in, d_out), |(i, j)| {
            let (row, col) = if d_in >= d_out { (i, j) } else { (j, i) };
            let sign = if r[(col, col)] < 0.0 { -1.0 } else { 1.0 };
            q[(row, col)] * sign
        });
        Linear {
            weight,
            bias: bias.then(|| Array1::zeros(d_out)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        if let Some(gb) = grad.bias.as_mut() {
            *gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight.t())
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *istd = 1.0 / (var + LN_EPS).sqrt();
            let s = *istd;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            let istd = cache.inv_std[i];
            for j in 0..out.len() {
                out[j] = istd * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

/// Multi-head scaled dot-product attention. Queries come from one token
/// sequence, keys and values from another (the same one for self-attention).
/// The key projection has no bias: softmax is invariant to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub n_heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Query rows paired with the key/value rows they attend to. Stacking
/// several sequences into one matrix and giving each its own block keeps
/// their attention separate while the projections run as one product.
pub type Block = (Range<usize>, Range<usize>);

pub struct AttentionCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    blocks: Vec<Block>,
    /// `probs[block][head]`
    probs: Vec<Vec<Array2<f64>>>,
    concat: Array2<f64>,
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Attention {
    pub fn zeros(d: usize, n_heads: usize) -> Self {
        Attention {
            n_heads,
            query: Linear::zeros(d, d, true),
            key: Linear::zeros(d, d, false),
            value: Linear::zeros(d, d, true),
            output: Linear::zeros(d, d, true),
        }
    }

    pub fn init<R: Rng>(d: usize, n_heads: usize, rng: &mut R) -> Self {
        Attention {
            n_heads,
            query: Linear::init(d, d, true, rng),
            key: Linear::init(d, d, false, rng),
            value: Linear::init(d, d, true, rng),
            output: Linear::init(d, d, true, rng),
        }
    }

    fn head_dim(&self) -> usize {
        self.query.weight.ncols() / self.n_heads
    }

    pub fn forward(&self, xq: &Array2<f64>, xkv: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        self.forward_blocks(xq, xkv, vec![(0..xq.nrows(), 0..xkv.nrows())])
    }

    pub fn forward_blocks(
        &self,
        xq: &Array2<f64>,
        xkv: &Array2<f64>,
        blocks: Vec<Block>,
    ) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(xq);
        let k = self.key.forward(xkv);
        let v = self.value.forward(xkv);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Array2::zeros((xq.nrows(), q.ncols()));
        let mut probs = Vec::with_capacity(blocks.len());
        for (rq, rk) in &blocks {
            let mut per_head = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let mut scores = q.slice(s![rq.clone(), cols.clone()]).dot(&k.slice(s![rk.clone(), cols.clone()]).t());
                scores *= scale;
                softmax_rows(&mut scores);
                concat
                    .slice_mut(s![rq.clone(), cols.clone()])
                    .assign(&scores.dot(&v.slice(s![rk.clone(), cols])));
                per_head.push(scores);
            }
            probs.push(per_head);
        }
        let out = self.output.forward(&concat);
        let cache = AttentionCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            blocks,
            probs,
            concat,
        };
        (out, cache)
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        grad: &mut Attention,
    ) -> (Array2<f64>, Array2<f64>) {
        let dconcat = self.output.backward(&cache.concat, dout, &mut grad.output);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for ((rq, rk), per_head) in cache.blocks.iter().zip(&cache.probs) {
            for (h, probs) in per_head.iter().enumerate() {
                let qs = s![rq.clone(), h * dh..(h + 1) * dh];
                let ks = s![rk.clone(), h * dh..(h + 1) * dh];
                let dout_h = dconcat.slice(qs);
                let dprobs = dout_h.dot(&cache.v.slice(ks).t());
                let mut dv_h = dv.slice_mut(ks);
                dv_h += &probs.t().dot(&dout_h);
                // softmax Jacobian, row by row
                let mut dscores = probs * &dprobs;
                for (mut row, p) in dscores.rows_mut().into_iter().zip(probs.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&p, |r, &pv| *r -= pv * dot);
                }
                dscores *= scale;
                let mut dq_h = dq.slice_mut(qs);
                dq_h += &dscores.dot(&cache.k.slice(ks));
                let mut dk_h = dk.slice_mut(ks);
                dk_h += &dscores.t().dot(&cache.q.slice(qs));
            }
        }
        let dxq = self.query.backward(&cache.xq, &dq, &mut grad.query);
        let dxkv = self.key.backward(&cache.xkv, &dk, &mut grad.key)
            + self.value.backward(&cache.xkv, &dv, &mut grad.value);
        (dxq, dxkv)
    }

    pub fn param_count(&self) -> usize {
        self.query.param_count()
            + self.key.param_count()
            + self.value.param_count()
            + self.output.param_count()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Position-wise feed-forward with tanh-approximated GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FeedForwardCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForward {
    pub fn zeros(d: usize, d_ff: usize) -> Self {
        FeedForward {
            up: Linear::zeros(d, d_ff, true),
            down: Linear::zeros(d_ff, d, true),
        }
    }

    pub fn init<R: Rng>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::init(d, d_ff, true, rng),
            down: Linear::init(d_ff, d, true, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.up.forward(x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(&act);
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache, dy: &Array2<f64>, grad: &mut FeedForward) -> Array2<f64> {
        let mut dact = self.down.backward(&cache.act, dy, &mut grad.down);
        dact.zip_mut_with(&cache.pre, |d, &p| *d *= gelu_grad(p));
        self.up.backward(&cache.x, &dact, &mut grad.up)
    }

    pub fn param_count(&self) -> usize {
        self.up.param_count() + self.down.param_count()
    }
}

/// Pre-norm self-attention layer used by the question branch.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionLayer {
    pub norm_attn: LayerNorm,
    pub self_attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

pub struct QuestionLayerCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ff: FeedForwardCache,
}

impl QuestionLayer {
    pub fn zeros(d: usize, n_heads: usize, d_ff: usize) -> Self {
        QuestionLayer {
            norm_attn: LayerNorm::zeros(d),
            self_attn: Attention::zeros(d, n_heads),
            norm_ff: LayerNorm::zeros(d),
            ff: FeedForward::zeros(d, d_ff),
        }
    }

    pub fn init<R: Rng>(d: usize, n_heads: usize, d_ff: usize, rng: &mut R) -> Self {
        QuestionLayer {
            norm_attn: LayerNorm::new(d),
            self_attn: Attention::init(d, n_heads, rng),
            norm_ff: LayerNorm::new(d),
            ff: FeedForward::init(d, d_ff, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, QuestionLayerCache) {
        let (n1, ln1) = self.norm_attn.forward(x);
        let (a, attn) = self.self_attn.forward(&n1, &n1);
        let x1 = x + &a;
        let (n2, ln2) = self.norm_ff.forward(&x1);
        let (f, ff) = self.ff.forward(&n2);
        (x1 + f, QuestionLayerCache { ln1, attn, ln2, ff })
    }

    pub fn backward(&self, cache: &QuestionLayerCache, dy: &Array2<f64>, grad: &mut QuestionLayer) -> Array2<f64> {
        let dn2 = self.ff.backward(&cache.ff, dy, &mut grad.ff);
        let dx1 = dy + &self.norm_ff.backward(&cache.ln2, &dn2, &mut grad.norm_ff);
        let (dq, dkv) = self.self_attn.backward(&cache.attn, &dx1, &mut grad.self_attn);
        let dn1 = dq + dkv;
        dx1.clone() + self.norm_attn.backward(&cache.ln1, &dn1, &mut grad.norm_attn)
    }

    pub fn param_count(&self) -> usize {
        self.norm_attn.param_count()
            + self.self_attn.param_count()
            + self.norm_ff.param_count()
            + self.ff.param_count()
    }
}

/// Pre-norm layer of the view branch: self-attention over view tokens,
/// cross-attention from view tokens to question tokens, feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualLayer {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub cross_attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

pub struct VisualLayerCache {
    ln1: LayerNormCache,
    self_attn: AttentionCache,
    ln2: LayerNormCache,
    cross_attn: AttentionCache,
    ln3: LayerNormCache,
    ff: FeedForwardCache,
}

impl VisualLayer {
    pub fn zeros(d: usize, n_heads: usize, d_ff: usize) -> Self {
        VisualLayer {
            norm_self: LayerNorm::zeros(d),
            self_attn: Attention::zeros(d, n_heads),
            norm_cross: LayerNorm::zeros(d),
            cross_attn: Attention::zeros(d, n_heads),
            norm_ff: LayerNorm::zeros(d),
            ff: FeedForward::zeros(d, d_ff),
        }
    }

    pub fn init<R: Rng>(d: usize, n_heads: usize, d_ff: usize, rng: &mut R) -> Self {
        VisualLayer {
            norm_self: LayerNorm::new(d),
            self_attn: Attention::init(d, n_heads, rng),
            norm_cross: LayerNorm::new(d),
            cross_attn: Attention::init(d, n_heads, rng),
            norm_ff: LayerNorm::new(d),
            ff: FeedForward::init(d, d_ff, rng),
        }
    }

    /// `x` stacks one or more views; `views` gives each view's rows. View
    /// tokens self-attend within their own view and every row
    /// cross-attends to the whole `memory`.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        memory: &Array2<f64>,
        views: &[Range<usize>],
    ) -> (Array2<f64>, VisualLayerCache) {
        let (n1, ln1) = self.norm_self.forward(x);
        let blocks = views.iter().map(|r| (r.clone(), r.clone())).collect();
        let (a, self_attn) = self.self_attn.forward_blocks(&n1, &n1, blocks);
        let x1 = x + &a;
        let (n2, ln2) = self.norm_cross.forward(&x1);
        let (c, cross_attn) = self.cross_attn.forward(&n2, memory);
        let x2 = x1 + c;
        let (n3, ln3) = self.norm_ff.forward(&x2);
        let (f, ff) = self.ff.forward(&n3);
        (
            x2 + f,
            VisualLayerCache {
                ln1,
                self_attn,
                ln2,
                cross_attn,
                ln3,
                ff,
            },
        )
    }

    /// Returns `(dL/dx, dL/dmemory)`.
    pub fn backward(
        &self,
        cache: &VisualLayerCache,
        dy: &Array2<f64>,
        grad: &mut VisualLayer,
    ) -> (Array2<f64>, Array2<f64>) {
        let dn3 = self.ff.backward(&cache.ff, dy, &mut grad.ff);
        let dx2 = dy + &self.norm_ff.backward(&cache.ln3, &dn3, &mut grad.norm_ff);
        let (dn2, dmemory) = self.cross_attn.backward(&cache.cross_attn, &dx2, &mut grad.cross_attn);
        let dx1 = &dx2 + &self.norm_cross.backward(&cache.ln2, &dn2, &mut grad.norm_cross);
        let (dq, dkv) = self.self_attn.backward(&cache.self_attn, &dx1, &mut grad.self_attn);
        let dn1 = dq + dkv;
        let dx = &dx1 + &self.norm_self.backward(&cache.ln1, &dn1, &mut grad.norm_self);
        (dx, dmemory)
    }

    pub fn param_count(&self) -> usize {
        self.norm_self.param_count()
            + self.self_attn.param_count()
            + self.norm_cross.param_count()
            + self.cross_attn.param_count()
            + self.norm_ff.param_count()
            + self.ff.param_count()
    }
}

pub fn mean_rows(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("at least one token")
}

/// Stacks token matrices row-wise and returns each one's row range.
pub fn stack_rows(parts: &[ArrayView2<'_, f64>]) -> (Array2<f64>, Vec<Range<usize>>) {
    let mut ranges = Vec::with_capacity(parts.len());
    let mut start = 0;
    for p in parts {
        ranges.push(start..start + p.nrows());
        start += p.nrows();
    }
    (concatenate(Axis(0), parts).expect("equal widths"), ranges)
}
