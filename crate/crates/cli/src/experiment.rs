//! Synthetic-world experiments: oracle labels, signal calibration, selector
//! training on generated scenes, strategy comparisons and the NMS threshold
//! sweep. Numbers produced here describe the synthetic world only.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use viewsel_core::scene::{
    embed_synthetic, nearest_concept_accuracy, synth_scene, EmbeddingStore, SceneError, SynthSpec, SyntheticQa,
    SyntheticScene, Trajectory,
};
use viewsel_core::selector::{
    evaluate_auc, score_views, train_selector, LabeledEmbedding, SelectorConfig, SelectorError,
    SelectorParams, TrainConfig, TrainInstance, TrainStats,
};
use viewsel_core::strategy::{question_seed, select_uniform, SelectionResult, Strategy, StrategyError};
use viewsel_core::{view_nms, Label, NmsConfig};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Nms(#[from] viewsel_core::nms::NmsError),
}

/// Shape of every generated scene and of its stand-in embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub room: [f64; 3],
    pub n_objects: usize,
    pub n_views: usize,
    pub trajectory: Trajectory,
    pub object_spread: f64,
    pub d_in: usize,
    pub view_tokens: usize,
    pub signal: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            room: [8.0, 6.0, 3.0],
            n_objects: 8,
            n_views: 64,
            trajectory: Trajectory::Walk,
            object_spread: 0.9,
            d_in: 32,
            view_tokens: 2,
            signal: 1.0,
        }
    }
}

impl WorldSpec {
    pub fn synth_spec(&self, scene_id: &str, seed: u64) -> SynthSpec {
        SynthSpec {
            scene_id: scene_id.to_string(),
            room: self.room,
            n_objects: self.n_objects,
            n_views: self.n_views,
            trajectory: self.trajectory,
            seed,
            object_spread: self.object_spread,
        }
    }
}

pub struct World {
    pub scene: SyntheticScene,
    pub store: EmbeddingStore,
}

/// Scene and embeddings for one seed. Embedding noise uses a seed derived
/// from the scene seed so neighbouring scenes do not share noise.
pub fn make_world(spec: &WorldSpec, prefix: &str, seed: u64) -> Result<World, ExperimentError> {
    let scene = synth_scene(&spec.synth_spec(&format!("{prefix}{seed:04}"), seed))?;
    let store = embed_synthetic(
        &scene,
        spec.d_in,
        spec.view_tokens,
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xE3B,
        spec.signal,
    );
    Ok(World { scene, store })
}

/// Oracle three-way label: positive when the view sees both objects the
/// question depends on, negative when it sees neither, uncertain otherwise.
pub fn oracle_label(scene: &SyntheticScene, qa: &SyntheticQa, view: usize) -> Label {
    let vis = &scene.visibility[view];
    match (vis.contains(&qa.anchor), vis.contains(&qa.answer)) {
        (true, true) => Label::Positive,
        (false, false) => Label::Negative,
        _ => Label::Uncertain,
    }
}

pub fn instances(world: &World) -> Result<Vec<TrainInstance>, ExperimentError> {
    let views = world.store.scene_views(&world.scene.manifest)?;
    let mut out = Vec::new();
    for qa in &world.scene.qa {
        let question = world.store.question_seq(&qa.qa.question_id)?;
        let labeled = views
            .iter()
            .enumerate()
            .map(|(i, v)| LabeledEmbedding {
                view: v.clone(),
                label: oracle_label(&world.scene, qa, i),
            })
            .collect();
        out.push(TrainInstance {
            question,
            views: labeled,
        });
    }
    Ok(out)
}

pub fn dataset(spec: &WorldSpec, prefix: &str, seeds: std::ops::Range<u64>) -> Result<Vec<TrainInstance>, ExperimentError> {
    let mut out = Vec::new();
    for s in seeds {
        out.extend(instances(&make_world(spec, prefix, s)?)?);
    }
    Ok(out)
}

/// Mean nearest-concept accuracy over scenes `seeds` at `spec.signal`.
pub fn separability(spec: &WorldSpec, seeds: std::ops::Range<u64>) -> Result<f64, ExperimentError> {
    let mut total = 0.0;
    let n = seeds.end - seeds.start;
    for s in seeds {
        let w = make_world(spec, "cal", s)?;
        total += nearest_concept_accuracy(&w.scene, &w.store);
    }
    Ok(total / n as f64)
}

/// Bisection for the signal strength at which views are nearest-concept
/// separable with accuracy `target`.
pub fn calibrate_signal(spec: &WorldSpec, target: f64, seeds: std::ops::Range<u64>) -> Result<f64, ExperimentError> {
    let (mut lo, mut hi) = (0.0, 4.0);
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        let acc = separability(&WorldSpec { signal: mid, ..spec.clone() }, seeds.clone())?;
        if acc < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnabilityRun {
    pub seed: u64,
    pub final_auc: f64,
    pub initial_auc: f64,
    pub epochs_to_target: Option<usize>,
}

/// Trains on scenes `[0, train_scenes)` and tracks pooled AUC on held-out
/// scenes, both generated with `data_seed` offsets.
pub fn learnability(
    spec: &WorldSpec,
    model: SelectorConfig,
    train: &TrainConfig,
    train_scenes: u64,
    holdout_scenes: u64,
    target: f64,
) -> Result<(LearnabilityRun, SelectorParams, TrainStats), ExperimentError> {
    let base = model.seed * 1000;
    let data = dataset(spec, "tr", base..base + train_scenes)?;
    let holdout = dataset(spec, "ho", base + 500..base + 500 + holdout_scenes)?;
    let initial = evaluate_auc(&SelectorParams::init(model), &holdout)?.unwrap_or(0.5);
    let (params, stats) = train_selector(&data, model, train, Some(&holdout))?;
    let run = LearnabilityRun {
        seed: model.seed,
        final_auc: *stats.holdout_auc.last().unwrap_or(&initial),
        initial_auc: initial,
        epochs_to_target: stats.holdout_auc.iter().position(|&a| a > target).map(|e| e + 1),
    };
    Ok((run, params, stats))
}

/// True when some selected view is answer-bearing.
pub fn covers(qa: &SyntheticQa, view_ids: &[String]) -> bool {
    view_ids.iter().any(|id| qa.answer_views.contains(id))
}

pub fn select_scored(
    world: &World,
    qa: &SyntheticQa,
    scores: &[f64],
    nms: &NmsConfig,
) -> Result<SelectionResult, ExperimentError> {
    let poses = world.scene.manifest.poses();
    let picked = view_nms(&poses, scores, nms)?;
    let mut by_frame = picked.selected.clone();
    by_frame.sort_by_key(|&i| world.scene.manifest.views[i].frame_index);
    let ids = |v: &[usize]| -> Vec<String> {
        v.iter().map(|&i| world.scene.manifest.views[i].view_id.clone()).collect()
    };
    Ok(SelectionResult {
        scene_id: world.scene.manifest.scene_id.clone(),
        question_id: qa.qa.question_id.clone(),
        strategy: Strategy::Cdviews,
        view_ids: ids(&picked.selected),
        scores: Some(picked.scores),
        feed_order: ids(&by_frame),
    })
}

pub fn selector_scores(world: &World, qa: &SyntheticQa, params: &SelectorParams) -> Result<Vec<f64>, ExperimentError> {
    let views = world.store.scene_views(&world.scene.manifest)?;
    let q = world.store.question_seq(&qa.qa.question_id)?;
    Ok(score_views(&q, &views, params)?.scores)
}

/// Exact match of the oracle answerer averaged over one scene's questions,
/// for each arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScores {
    pub scene_id: String,
    pub uniform: f64,
    pub selector_only: f64,
    pub selector_nms: f64,
}

pub fn compare_strategies(
    world: &World,
    params: &SelectorParams,
    k: usize,
    threshold: f64,
    seed: u64,
) -> Result<Option<ArmScores>, ExperimentError> {
    let scene = &world.scene;
    if scene.qa.is_empty() {
        return Ok(None);
    }
    let mut sums = [0.0; 3];
    for qa in &scene.qa {
        let uni = select_uniform(&scene.manifest, &qa.qa.question_id, k, question_seed(seed, &qa.qa.question_id))?;
        let scores = selector_scores(world, qa, params)?;
        let only = select_scored(world, qa, &scores, &NmsConfig::new(0.0, k))?;
        let nms = select_scored(world, qa, &scores, &NmsConfig::new(threshold, k))?;
        for (s, r) in sums.iter_mut().zip([&uni, &only, &nms]) {
            *s += covers(qa, &r.feed_order) as u8 as f64;
        }
    }
    let n = scene.qa.len() as f64;
    Ok(Some(ArmScores {
        scene_id: scene.manifest.scene_id.clone(),
        uniform: sums[0] / n,
        selector_only: sums[1] / n,
        selector_nms: sums[2] / n,
    }))
}

/// One-sided exact sign test for `b > a` over paired observations; ties
/// are dropped. Returns (wins, losses, p-value).
pub fn sign_test(a: &[f64], b: &[f64]) -> (u64, u64, f64) {
    let wins = a.iter().zip(b).filter(|(x, y)| y > x).count() as u64;
    let losses = a.iter().zip(b).filter(|(x, y)| y < x).count() as u64;
    let n = wins + losses;
    if n == 0 {
        return (0, 0, 1.0);
    }
    let dist = Binomial::new(0.5, n).expect("valid binomial");
    let p = if wins == 0 { 1.0 } else { 1.0 - dist.cdf(wins - 1) };
    (wins, losses, p)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One row of a threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    pub k: usize,
    pub threshold: f64,
    pub mean_selected: f64,
    pub coverage: f64,
}

/// Selected-view count and answer coverage per (k, T), averaged over all
/// questions of all worlds, using fixed per-question scores.
pub fn sweep(
    worlds: &[World],
    scores: &HashMap<String, Vec<f64>>,
    ks: &[usize],
    thresholds: &[f64],
) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &k in ks {
        for &t in thresholds {
            let (mut selected, mut covered, mut n) = (0usize, 0usize, 0usize);
            for w in worlds {
                for qa in &w.scene.qa {
                    let s = &scores[&qa.qa.question_id];
                    let r = select_scored(w, qa, s, &NmsConfig::new(t, k))?;
                    selected += r.view_ids.len();
                    covered += covers(qa, &r.view_ids) as usize;
                    n += 1;
                }
            }
            rows.push(SweepRow {
                strategy: "cdviews".into(),
                k,
                threshold: t,
                mean_selected: selected as f64 / n.max(1) as f64,
                coverage: covered as f64 / n.max(1) as f64,
            });
        }
    }
    Ok(rows)
}
