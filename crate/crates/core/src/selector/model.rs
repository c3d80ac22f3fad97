use ndarray::{Array1, Array2};

use std::ops::Range;

use super::layers::{mean_rows, stack_rows, QuestionLayerCache, VisualLayerCache};
use super::params::SelectorParams;
use super::SelectorError;

/// Token matrix `(n_tokens, d_in)` for one question or one view.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeq {
    pub tokens: Array2<f64>,
    pub source_id: String,
}

impl EmbeddingSeq {
    pub fn new(source_id: impl Into<String>, tokens: Array2<f64>) -> Self {
        EmbeddingSeq {
            tokens,
            source_id: source_id.into(),
        }
    }

    fn check(&self, d_in: usize) -> Result<(), SelectorError> {
        if self.tokens.nrows() == 0 {
            return Err(SelectorError::EmptySequence(self.source_id.clone()));
        }
        if self.tokens.ncols() != d_in {
            return Err(SelectorError::DimensionMismatch {
                id: self.source_id.clone(),
                expected: d_in,
                found: self.tokens.ncols(),
            });
        }
        if !self.tokens.iter().all(|v| v.is_finite()) {
            return Err(SelectorError::NonFiniteInput(self.source_id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorOutput {
    pub pooled_question: Array1<f64>,
    pub pooled_views: Vec<Array1<f64>>,
    /// Cosine similarity between the pooled question and each pooled view.
    pub scores: Vec<f64>,
}

struct QuestionPass {
    input: Array2<f64>,
    /// Token states entering each layer; layer `l` of the view branch
    /// cross-attends to `memories[l]`.
    memories: Vec<Array2<f64>>,
    caches: Vec<QuestionLayerCache>,
    pooled: Array1<f64>,
    n_tokens: usize,
}

/// Several views run together: their tokens are stacked row-wise.
struct ViewPass {
    input: Array2<f64>,
    caches: Vec<VisualLayerCache>,
    pooled: Vec<Array1<f64>>,
    ranges: Vec<Range<usize>>,
}

fn question_forward(params: &SelectorParams, question: &EmbeddingSeq) -> QuestionPass {
    let mut state = params.projection.forward(&question.tokens);
    let mut memories = Vec::with_capacity(params.question_layers.len());
    let mut caches = Vec::with_capacity(params.question_layers.len());
    for layer in &params.question_layers {
        let (next, cache) = layer.forward(&state);
        memories.push(std::mem::replace(&mut state, next));
        caches.push(cache);
    }
    QuestionPass {
        input: question.tokens.clone(),
        memories,
        caches,
        pooled: mean_rows(&state),
        n_tokens: state.nrows(),
    }
}

fn view_forward(params: &SelectorParams, views: &[&EmbeddingSeq], memories: &[Array2<f64>]) -> ViewPass {
    let parts: Vec<_> = views.iter().map(|v| v.tokens.view()).collect();
    let (input, ranges) = stack_rows(&parts);
    let mut state = params.projection.forward(&input);
    let mut caches = Vec::with_capacity(params.visual_layers.len());
    for (layer, memory) in params.visual_layers.iter().zip(memories) {
        let (next, cache) = layer.forward(&state, memory, &ranges);
        state = next;
        caches.push(cache);
    }
    let pooled = ranges
        .iter()
        .map(|r| mean_rows(&state.slice(ndarray::s![r.clone(), ..]).to_owned()))
        .collect();
    ViewPass {
        input,
        caches,
        pooled,
        ranges,
    }
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64, SelectorError> {
    let denom = a.dot(a).sqrt() * b.dot(b).sqrt();
    let c = a.dot(b) / denom;
    if !c.is_finite() || denom == 0.0 {
        return Err(SelectorError::NonFiniteActivation);
    }
    Ok(c.clamp(-1.0, 1.0))
}

// d cos(a, b) / d a
fn cosine_grad(a: &Array1<f64>, b: &Array1<f64>, cos: f64) -> Array1<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    b / (na * nb) - a * (cos / (na * na))
}

fn check_params(params: &SelectorParams) -> Result<(), SelectorError> {
    params.config.validate().map_err(SelectorError::InvalidConfig)
}

/// Scores every view against the question by cosine similarity of the
/// pooled branch outputs.
pub fn score_views(
    question: &EmbeddingSeq,
    views: &[EmbeddingSeq],
    params: &SelectorParams,
) -> Result<SelectorOutput, SelectorError> {
    check_params(params)?;
    if views.is_empty() {
        return Err(SelectorError::NoViews);
    }
    let d_in = params.config.d_in;
    question.check(d_in)?;
    for v in views {
        v.check(d_in)?;
    }
    let q = question_forward(params, question);
    let refs: Vec<&EmbeddingSeq> = views.iter().collect();
    let pooled_views = view_forward(params, &refs, &q.memories).pooled;
    let scores = pooled_views
        .iter()
        .map(|v| cosine(&q.pooled, v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SelectorOutput {
        pooled_question: q.pooled,
        pooled_views,
        scores,
    })
}

/// One question with the labeled views that enter the loss.
#[derive(Debug, Clone)]
pub struct LossItem<'a> {
    pub question: &'a EmbeddingSeq,
    /// `(view, target)` with target 1.0 for positive and 0.0 for negative.
    pub views: Vec<(&'a EmbeddingSeq, f64)>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// -[y ln p + (1-y) ln(1-p)] with p = sigmoid(z), evaluated stably.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

/// Probability that a view is critical, `sigmoid(logit_scale * score)`.
pub fn view_probability(params: &SelectorParams, score: f64) -> f64 {
    sigmoid(params.logit_scale * score)
}

fn label_count(items: &[LossItem<'_>]) -> usize {
    items.iter().map(|i| i.views.len()).sum()
}

fn check_items(params: &SelectorParams, items: &[LossItem<'_>]) -> Result<(), SelectorError> {
    check_params(params)?;
    for item in items {
        item.question.check(params.config.d_in)?;
        for (v, _) in &item.views {
            v.check(params.config.d_in)?;
        }
    }
    Ok(())
}

/// Mean binary cross-entropy over every labeled view in `items`.
pub fn batch_loss(params: &SelectorParams, items: &[LossItem<'_>]) -> Result<f64, SelectorError> {
    check_items(params, items)?;
    let n = label_count(items);
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for item in items {
        if item.views.is_empty() {
            continue;
        }
        let q = question_forward(params, item.question);
        let refs: Vec<&EmbeddingSeq> = item.views.iter().map(|(v, _)| *v).collect();
        let pass = view_forward(params, &refs, &q.memories);
        for (pooled, (_, target)) in pass.pooled.iter().zip(&item.views) {
            let cos = cosine(&q.pooled, pooled)?;
            total += bce_with_logit(params.logit_scale * cos, *target);
        }
    }
    Ok(total / n as f64)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn batch_loss_and_grad(
    params: &SelectorParams,
    items: &[LossItem<'_>],
) -> Result<(f64, SelectorParams), SelectorError> {
    check_items(params, items)?;
    let mut grad = SelectorParams::zeros(params.config);
    let n = label_count(items);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n as f64;
    let d_model = params.config.d_model;
    let mut total = 0.0;

    for item in items {
        if item.views.is_empty() {
            continue;
        }
        let q = question_forward(params, item.question);
        let mut dq_pooled = Array1::<f64>::zeros(d_model);
        let mut dmemories: Vec<Array2<f64>> = q.memories.iter().map(|m| Array2::zeros(m.raw_dim())).collect();

        let refs: Vec<&EmbeddingSeq> = item.views.iter().map(|(v, _)| *v).collect();
        let pass = view_forward(params, &refs, &q.memories);
        let mut dstate = Array2::<f64>::zeros((pass.input.nrows(), d_model));
        for ((pooled, range), (_, target)) in pass.pooled.iter().zip(&pass.ranges).zip(&item.views) {
            let cos = cosine(&q.pooled, pooled)?;
            let logit = params.logit_scale * cos;
            total += bce_with_logit(logit, *target);

            let dlogit = (sigmoid(logit) - target) * inv_n;
            grad.logit_scale += dlogit * cos;
            let dcos = dlogit * params.logit_scale;
            dq_pooled += &(cosine_grad(&q.pooled, pooled, cos) * dcos);
            let dv_pooled = cosine_grad(pooled, &q.pooled, cos) * dcos;

            // mean pooling spreads the gradient evenly over the view's tokens
            let row = dv_pooled / range.len() as f64;
            dstate.slice_mut(ndarray::s![range.clone(), ..]).assign(&row.broadcast((range.len(), d_model)).expect("row"));
        }
        for (l, layer) in params.visual_layers.iter().enumerate().rev() {
            let (dx, dmem) = layer.backward(&pass.caches[l], &dstate, &mut grad.visual_layers[l]);
            dmemories[l] += &dmem;
            dstate = dx;
        }
        params.projection.backward(&pass.input, &dstate, &mut grad.projection);

        let row = dq_pooled / q.n_tokens as f64;
        let mut dstate = Array2::from_shape_fn((q.n_tokens, d_model), |(_, j)| row[j]);
        for (l, layer) in params.question_layers.iter().enumerate().rev() {
            dstate = layer.backward(&q.caches[l], &dstate, &mut grad.question_layers[l]);
            dstate += &dmemories[l];
        }
        params.projection.backward(&q.input, &dstate, &mut grad.projection);
    }

    let loss = total * inv_n;
    if !loss.is_finite() || !grad.all_finite() {
        return Err(SelectorError::NonFiniteActivation);
    }
    Ok((loss, grad))
}
