use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{batch_loss_and_grad, score_views, EmbeddingSeq, LossItem};
use super::params::{SelectorConfig, SelectorParams};
use super::SelectorError;
use crate::label::Label;

const MIN_LOGIT_SCALE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct LabeledEmbedding {
    pub view: EmbeddingSeq,
    pub label: Label,
}

/// A question with its candidate views and their annotator labels.
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub question: EmbeddingSeq,
    pub views: Vec<LabeledEmbedding>,
}

impl TrainInstance {
    fn indices_with(&self, label: Label) -> Vec<usize> {
        self.views
            .iter()
            .enumerate()
            .filter(|(_, v)| v.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.views.iter().filter(|v| v.label.is_trainable()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Instances per optimizer step.
    pub batch_size: usize,
    pub pos_per_instance: usize,
    pub neg_per_instance: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            batch_size: 8,
            pos_per_instance: 5,
            neg_per_instance: 5,
            epochs: 50,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SelectorError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.pos_per_instance + self.neg_per_instance > 0
            && self.adam.beta1 >= 0.0
            && self.adam.beta1 < 1.0
            && self.adam.beta2 >= 0.0
            && self.adam.beta2 < 1.0
            && self.adam.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SelectorError::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean per-step loss in each epoch.
    pub epoch_loss: Vec<f64>,
    /// Labeled views that entered the loss in each epoch.
    pub epoch_labels: Vec<usize>,
    /// Holdout AUC after each epoch; empty when no holdout was given.
    pub holdout_auc: Vec<f64>,
    pub steps: usize,
}

/// Sampled views of one instance: `(view index, target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEntry {
    pub instance: usize,
    pub views: Vec<(usize, f64)>,
}

fn sample_from<R: Rng>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    if pool.is_empty() || count == 0 {
        return Vec::new();
    }
    if pool.len() >= count {
        rand::seq::index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Draws positives and negatives for one instance. Scarce classes are drawn
/// with replacement; uncertain views are never drawn.
pub fn sample_instance<R: Rng>(instance: &TrainInstance, config: &TrainConfig, rng: &mut R) -> Vec<(usize, f64)> {
    let positives = instance.indices_with(Label::Positive);
    let negatives = instance.indices_with(Label::Negative);
    let mut out: Vec<(usize, f64)> = sample_from(&positives, config.pos_per_instance, rng)
        .into_iter()
        .map(|i| (i, 1.0))
        .collect();
    out.extend(
        sample_from(&negatives, config.neg_per_instance, rng)
            .into_iter()
            .map(|i| (i, 0.0)),
    );
    out
}

pub fn assemble_batch<R: Rng>(
    dataset: &[TrainInstance],
    instances: &[usize],
    config: &TrainConfig,
    rng: &mut R,
) -> Vec<BatchEntry> {
    instances
        .iter()
        .map(|&i| BatchEntry {
            instance: i,
            views: sample_instance(&dataset[i], config, rng),
        })
        .collect()
}

pub fn loss_items<'a>(dataset: &'a [TrainInstance], batch: &[BatchEntry]) -> Vec<LossItem<'a>> {
    batch
        .iter()
        .map(|entry| {
            let inst = &dataset[entry.instance];
            LossItem {
                question: &inst.question,
                views: entry.views.iter().map(|&(v, t)| (&inst.views[v].view, t)).collect(),
            }
        })
        .collect()
}

/// Plain Adam over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Adam {
            config,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut SelectorParams, grad: &SelectorParams, learning_rate: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let grads = grad.flatten();
        let mut offset = 0;
        for (_, tensor) in params.tensors_mut() {
            for p in tensor.iter_mut() {
                let g = grads[offset];
                let m = &mut self.first[offset];
                let v = &mut self.second[offset];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
                offset += 1;
            }
        }
        params.logit_scale = params.logit_scale.max(MIN_LOGIT_SCALE);
    }
}

/// Area under the ROC curve via average ranks (Mann-Whitney U).
/// `None` when either class is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Pooled AUC over every trainable view of every instance.
pub fn evaluate_auc(params: &SelectorParams, instances: &[TrainInstance]) -> Result<Option<f64>, SelectorError> {
    let mut scores = Vec::new();
    let mut positive = Vec::new();
    for inst in instances {
        let views: Vec<&LabeledEmbedding> = inst.views.iter().filter(|v| v.label.is_trainable()).collect();
        if views.is_empty() {
            continue;
        }
        let seqs: Vec<EmbeddingSeq> = views.iter().map(|v| v.view.clone()).collect();
        let out = score_views(&inst.question, &seqs, params)?;
        scores.extend(out.scores);
        positive.extend(views.iter().map(|v| v.label == Label::Positive));
    }
    Ok(auc(&scores, &positive))
}

/// Trains a fresh scorer initialized from `model_config.seed`.
pub fn train_selector(
    dataset: &[TrainInstance],
    model_config: SelectorConfig,
    config: &TrainConfig,
    holdout: Option<&[TrainInstance]>,
) -> Result<(SelectorParams, TrainStats), SelectorError> {
    let params = SelectorParams::init(model_config);
    train_from(params, dataset, config, holdout)
}

/// Continues training from existing parameters.
pub fn train_from(
    mut params: SelectorParams,
    dataset: &[TrainInstance],
    config: &TrainConfig,
    holdout: Option<&[TrainInstance]>,
) -> Result<(SelectorParams, TrainStats), SelectorError> {
    config.validate()?;
    params.config.validate().map_err(SelectorError::InvalidConfig)?;
    let trainable: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset[i].trainable_count() > 0)
        .collect();
    if trainable.is_empty() {
        return Err(SelectorError::NoTrainableLabels);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(params.param_count(), config.adam);
    let mut stats = TrainStats::default();

    for _ in 0..config.epochs {
        let mut order = trainable.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut labels = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = assemble_batch(dataset, chunk, config, &mut rng);
            let items = loss_items(dataset, &batch);
            labels += items.iter().map(|i| i.views.len()).sum::<usize>();
            let (loss, grad) = batch_loss_and_grad(&params, &items)?;
            adam.step(&mut params, &grad, config.learning_rate);
            loss_sum += loss;
            steps += 1;
        }
        if !params.all_finite() {
            return Err(SelectorError::NonFiniteActivation);
        }
        stats.epoch_loss.push(loss_sum / steps as f64);
        stats.epoch_labels.push(labels);
        stats.steps += steps;
        if let Some(holdout) = holdout {
            if let Some(a) = evaluate_auc(&params, holdout)? {
                stats.holdout_auc.push(a);
            }
        }
    }
    Ok((params, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn dummy(id: &str) -> EmbeddingSeq {
        EmbeddingSeq::new(id, Array2::zeros((1, 4)))
    }

    fn instance(labels: &[Label]) -> TrainInstance {
        TrainInstance {
            question: dummy("q"),
            views: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| LabeledEmbedding {
                    view: dummy(&format!("v{i}")),
                    label,
                })
                .collect(),
        }
    }

    // O(n^2) pair-counting oracle.
    fn auc_pairs(scores: &[f64], positive: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &pi) in positive.iter().enumerate() {
            for (j, &pj) in positive.iter().enumerate() {
                if pi && !pj {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 5.0).collect();
            let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            positive[0] = true;
            positive[1] = false;
            let a = auc(&scores, &positive).unwrap();
            assert!((a - auc_pairs(&scores, &positive)).abs() < 1e-12);
        }
        assert_eq!(auc(&[1.0, 2.0], &[true, true]), None);
    }

    #[test]
    fn eighty_labels_per_step() {
        let labels: Vec<Label> = (0..30)
            .map(|i| match i % 3 {
                0 => Label::Positive,
                1 => Label::Negative,
                _ => Label::Uncertain,
            })
            .collect();
        let dataset: Vec<TrainInstance> = (0..8).map(|_| instance(&labels)).collect();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = assemble_batch(&dataset, &(0..8).collect::<Vec<_>>(), &cfg, &mut rng);
        let total: usize = batch.iter().map(|b| b.views.len()).sum();
        assert_eq!(total, 80);
        for entry in &batch {
            let pos = entry.views.iter().filter(|(_, t)| *t == 1.0).count();
            assert_eq!(pos, 5);
            // without replacement when there are enough
            let mut idx: Vec<usize> = entry.views.iter().map(|(i, _)| *i).collect();
            idx.sort();
            idx.dedup();
            assert_eq!(idx.len(), 10);
            for (i, _) in &entry.views {
                assert_ne!(dataset[entry.instance].views[*i].label, Label::Uncertain);
            }
        }
    }

    #[test]
    fn scarce_positives_are_resampled() {
        let inst = instance(&[Label::Positive, Label::Negative, Label::Negative, Label::Uncertain]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let drawn = sample_instance(&inst, &TrainConfig::default(), &mut rng);
        assert_eq!(drawn.len(), 10);
        assert!(drawn.iter().all(|(i, _)| *i != 3));
        assert_eq!(drawn.iter().filter(|(i, _)| *i == 0).count(), 5);
    }

    #[test]
    fn all_uncertain_is_an_error() {
        let dataset = vec![instance(&[Label::Uncertain, Label::Uncertain])];
        let cfg = SelectorConfig {
            d_in: 4,
            d_model: 4,
            n_heads: 1,
            d_ff: 8,
            n_layers: 1,
            seed: 0,
        };
        assert!(matches!(
            train_selector(&dataset, cfg, &TrainConfig::default(), None),
            Err(SelectorError::NoTrainableLabels)
        ));
    }
}
