use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Attention, FeedForward, LayerNorm, Linear, QuestionLayer, VisualLayer};

pub const INITIAL_LOGIT_SCALE: f64 = 10.0;

/// Std of residual output projections (attention output, FFN down) before
/// the 1/sqrt(2 * n_layers) depth factor.
pub const RESIDUAL_INIT_STD: f64 = 0.02;

/// Architecture hyperparameters of the view scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig::desk()
    }
}

impl SelectorConfig {
    /// Small default used for synthetic experiments on a laptop.
    pub fn desk() -> Self {
        SelectorConfig {
            d_in: 32,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            n_layers: 1,
            seed: 0,
        }
    }

    /// Full-size configuration for 3584-wide vision-encoder features,
    /// sized to roughly 5.9M trainable scalars.
    pub fn paper_scale() -> Self {
        SelectorConfig {
            d_in: 3584,
            d_model: 320,
            n_heads: 8,
            d_ff: 896,
            n_layers: 2,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_in == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err("all dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let norm = 2 * d;
        let attn = 4 * d * d + 3 * d;
        let ff = 2 * d * f + f + d;
        let question = 2 * norm + attn + ff;
        let visual = 3 * norm + 2 * attn + ff;
        self.d_in * d + d + self.n_layers * (question + visual) + 1
    }
}

/// All trainable weights of the view scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    pub config: SelectorConfig,
    /// Shared by the question and view branches.
    pub projection: Linear,
    pub question_layers: Vec<QuestionLayer>,
    pub visual_layers: Vec<VisualLayer>,
    pub logit_scale: f64,
}

impl SelectorParams {
    /// Random initialization from `config.seed`.
    pub fn init(config: SelectorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, h, f) = (config.d_model, config.n_heads, config.d_ff);
        let projection = Linear::init_orthogonal(config.d_in, d, true, &mut rng);
        let question_layers = (0..config.n_layers)
            .map(|_| QuestionLayer::init(d, h, f, &mut rng))
            .collect();
        let visual_layers = (0..config.n_layers)
            .map(|_| VisualLayer::init(d, h, f, &mut rng))
            .collect();
        let mut params = SelectorParams {
            config,
            projection,
            question_layers,
            visual_layers,
            logit_scale: INITIAL_LOGIT_SCALE,
        };
        if config.n_layers > 0 {
            // sampled at 1/sqrt(fan_in); rescaling keeps the RNG stream fixed
            let target = RESIDUAL_INIT_STD / (2.0 * config.n_layers as f64).sqrt();
            let attn = target * (d as f64).sqrt();
            let down = target * (f as f64).sqrt();
            for l in &mut params.question_layers {
                l.self_attn.output.weight *= attn;
                l.ff.down.weight *= down;
            }
            for l in &mut params.visual_layers {
                l.self_attn.output.weight *= attn;
                l.cross_attn.output.weight *= attn;
                l.ff.down.weight *= down;
            }
        }
        params
    }

    /// Same shapes as `init(config)`, every entry zero. Used for gradients.
    pub fn zeros(config: SelectorConfig) -> Self {
        let (d, h, f) = (config.d_model, config.n_heads, config.d_ff);
        SelectorParams {
            config,
            projection: Linear::zeros(config.d_in, d, true),
            question_layers: (0..config.n_layers).map(|_| QuestionLayer::zeros(d, h, f)).collect(),
            visual_layers: (0..config.n_layers).map(|_| VisualLayer::zeros(d, h, f)).collect(),
            logit_scale: 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.projection.param_count()
            + self.question_layers.iter().map(|l| l.param_count()).sum::<usize>()
            + self.visual_layers.iter().map(|l| l.param_count()).sum::<usize>()
            + 1
    }

    /// Zeroes the output projection of every attention block, so attention
    /// contributes only its output bias.
    pub fn zero_attention_outputs(&mut self) {
        let zero = |a: &mut Attention| {
            a.output.weight.fill(0.0);
        };
        for layer in &mut self.question_layers {
            zero(&mut layer.self_attn);
        }
        for layer in &mut self.visual_layers {
            zero(&mut layer.self_attn);
            zero(&mut layer.cross_attn);
        }
    }

    /// Every tensor, flattened, in the canonical serialization order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        push_linear(&mut out, "projection".into(), &self.projection);
        for (i, l) in self.question_layers.iter().enumerate() {
            let p = format!("question.{i}");
            push_norm(&mut out, format!("{p}.norm_attn"), &l.norm_attn);
            push_attention(&mut out, format!("{p}.self_attn"), &l.self_attn);
            push_norm(&mut out, format!("{p}.norm_ff"), &l.norm_ff);
            push_ff(&mut out, format!("{p}.ff"), &l.ff);
        }
        for (i, l) in self.visual_layers.iter().enumerate() {
            let p = format!("visual.{i}");
            push_norm(&mut out, format!("{p}.norm_self"), &l.norm_self);
            push_attention(&mut out, format!("{p}.self_attn"), &l.self_attn);
            push_norm(&mut out, format!("{p}.norm_cross"), &l.norm_cross);
            push_attention(&mut out, format!("{p}.cross_attn"), &l.cross_attn);
            push_norm(&mut out, format!("{p}.norm_ff"), &l.norm_ff);
            push_ff(&mut out, format!("{p}.ff"), &l.ff);
        }
        out.push(("logit_scale".into(), std::slice::from_ref(&self.logit_scale)));
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        push_linear_mut(&mut out, "projection".into(), &mut self.projection);
        for (i, l) in self.question_layers.iter_mut().enumerate() {
            let p = format!("question.{i}");
            push_norm_mut(&mut out, format!("{p}.norm_attn"), &mut l.norm_attn);
            push_attention_mut(&mut out, format!("{p}.self_attn"), &mut l.self_attn);
            push_norm_mut(&mut out, format!("{p}.norm_ff"), &mut l.norm_ff);
            push_ff_mut(&mut out, format!("{p}.ff"), &mut l.ff);
        }
        for (i, l) in self.visual_layers.iter_mut().enumerate() {
            let p = format!("visual.{i}");
            push_norm_mut(&mut out, format!("{p}.norm_self"), &mut l.norm_self);
            push_attention_mut(&mut out, format!("{p}.self_attn"), &mut l.self_attn);
            push_norm_mut(&mut out, format!("{p}.norm_cross"), &mut l.norm_cross);
            push_attention_mut(&mut out, format!("{p}.cross_attn"), &mut l.cross_attn);
            push_norm_mut(&mut out, format!("{p}.norm_ff"), &mut l.norm_ff);
            push_ff_mut(&mut out, format!("{p}.ff"), &mut l.ff);
        }
        out.push(("logit_scale".into(), std::slice::from_mut(&mut self.logit_scale)));
        out
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn push_linear<'a>(out: &mut Vec<(String, &'a [f64])>, name: String, l: &'a Linear) {
    out.push((format!("{name}.weight"), slice2(&l.weight)));
    if let Some(b) = &l.bias {
        out.push((format!("{name}.bias"), b.as_slice().expect("contiguous")));
    }
}

fn push_norm<'a>(out: &mut Vec<(String, &'a [f64])>, name: String, n: &'a LayerNorm) {
    out.push((format!("{name}.gamma"), n.gamma.as_slice().expect("contiguous")));
    out.push((format!("{name}.beta"), n.beta.as_slice().expect("contiguous")));
}

fn push_attention<'a>(out: &mut Vec<(String, &'a [f64])>, name: String, a: &'a Attention) {
    push_linear(out, format!("{name}.query"), &a.query);
    push_linear(out, format!("{name}.key"), &a.key);
    push_linear(out, format!("{name}.value"), &a.value);
    push_linear(out, format!("{name}.output"), &a.output);
}

fn push_ff<'a>(out: &mut Vec<(String, &'a [f64])>, name: String, f: &'a FeedForward) {
    push_linear(out, format!("{name}.up"), &f.up);
    push_linear(out, format!("{name}.down"), &f.down);
}

fn push_linear_mut<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: String, l: &'a mut Linear) {
    out.push((
        format!("{name}.weight"),
        l.weight.as_slice_mut().expect("standard layout"),
    ));
    if let Some(b) = l.bias.as_mut() {
        out.push((format!("{name}.bias"), b.as_slice_mut().expect("contiguous")));
    }
}

fn push_norm_mut<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: String, n: &'a mut LayerNorm) {
    out.push((format!("{name}.gamma"), n.gamma.as_slice_mut().expect("contiguous")));
    out.push((format!("{name}.beta"), n.beta.as_slice_mut().expect("contiguous")));
}

fn push_attention_mut<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: String, a: &'a mut Attention) {
    push_linear_mut(out, format!("{name}.query"), &mut a.query);
    push_linear_mut(out, format!("{name}.key"), &mut a.key);
    push_linear_mut(out, format!("{name}.value"), &mut a.value);
    push_linear_mut(out, format!("{name}.output"), &mut a.output);
}

fn push_ff_mut<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: String, f: &'a mut FeedForward) {
    push_linear_mut(out, format!("{name}.up"), &mut f.up);
    push_linear_mut(out, format!("{name}.down"), &mut f.down);
}
