//! Stand-alone tools: NMS over a scored manifest, the gradient check
//! fixture, and the threshold ablation table.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use viewsel_core::scene::{load_manifest, read_jsonl};
use viewsel_core::selector::{EmbeddingSeq, LossItem, SelectorConfig, SelectorParams};
use viewsel_core::strategy::{embedding_similarity, question_seed, select_evenly_spaced, select_uniform};
use viewsel_core::{suppression_witness, view_nms, NmsConfig, Witness};

use crate::error::CliError;
use crate::experiment::{covers, select_scored, selector_scores, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredView {
    pub view_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmsOutput {
    pub scene_id: String,
    pub threshold: f64,
    pub k: usize,
    /// Kept views, best first.
    pub selected: Vec<String>,
    pub scores: Vec<f64>,
    pub feed_order: Vec<String>,
    /// Ranked views examined before the budget ran out.
    pub processed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessRow {
    pub view_id: String,
    pub reason: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suppressed_by: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
}

pub fn run_nms(manifest: &Path, scores: &Path, config: &NmsConfig) -> Result<(NmsOutput, Vec<WitnessRow>), CliError> {
    let scene = load_manifest(manifest)?;
    scene.validate()?;
    let rows: Vec<ScoredView> = read_jsonl(scores)?;
    let mut by_id: HashMap<&str, f64> = HashMap::new();
    for r in &rows {
        if by_id.insert(&r.view_id, r.score).is_some() {
            return Err(CliError::Data(format!("view `{}` scored twice", r.view_id)));
        }
    }
    let mut s = Vec::with_capacity(scene.views.len());
    for v in &scene.views {
        s.push(
            *by_id
                .get(v.view_id.as_str())
                .ok_or_else(|| CliError::Data(format!("no score for view `{}`", v.view_id)))?,
        );
    }
    if by_id.len() != scene.views.len() {
        return Err(CliError::Data("scores name views missing from the manifest".into()));
    }
    let poses = scene.poses();
    let result = view_nms(&poses, &s, config)?;
    let id = |i: usize| scene.views[i].view_id.clone();
    let mut by_frame = result.selected.clone();
    by_frame.sort_by_key(|&i| (scene.views[i].frame_index, i));
    let witnesses = suppression_witness(&result, &poses, &s, config)?
        .into_iter()
        .map(|(view, w)| match w {
            Witness::Suppressed { by, distance } => WitnessRow {
                view_id: id(view),
                reason: "suppressed".into(),
                suppressed_by: Some(id(by)),
                distance: Some(distance),
            },
            Witness::BudgetExhausted => WitnessRow {
                view_id: id(view),
                reason: "budget_exhausted".into(),
                suppressed_by: None,
                distance: None,
            },
        })
        .collect();
    let out = NmsOutput {
        scene_id: scene.scene_id.clone(),
        threshold: config.threshold,
        k: config.max_views,
        selected: result.selected.iter().map(|&i| id(i)).collect(),
        scores: result.scores.clone(),
        feed_order: by_frame.into_iter().map(id).collect(),
        processed: result.processed,
    };
    Ok((out, witnesses))
}

/// Random batch for gradient checks: two questions with three labeled views
/// each, token counts varying per view.
pub struct GradFixture {
    pub questions: Vec<EmbeddingSeq>,
    pub views: Vec<Vec<(EmbeddingSeq, f64)>>,
}

impl GradFixture {
    pub fn items(&self) -> Vec<LossItem<'_>> {
        self.questions
            .iter()
            .zip(&self.views)
            .map(|(q, vs)| LossItem {
                question: q,
                views: vs.iter().map(|(v, t)| (v, *t)).collect(),
            })
            .collect()
    }
}

pub const GRADCHECK_JITTER: f64 = 0.3;

/// Parameters and batch for a gradient check. Every parameter is jittered
/// by up to [`GRADCHECK_JITTER`] so none sits at an init constant, and the
/// logit scale is lowered to 3 so the loss is not saturated.
pub fn gradcheck_fixture(config: SelectorConfig, seed: u64) -> (SelectorParams, GradFixture) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = SelectorParams::init(config);
    for (_, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-GRADCHECK_JITTER..GRADCHECK_JITTER);
        }
    }
    params.logit_scale = 3.0;
    let d = config.d_in;
    let mut seq = |id: String, n: usize| {
        EmbeddingSeq::new(id, Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0)))
    };
    let questions: Vec<EmbeddingSeq> = (0..2).map(|i| seq(format!("q{i}"), 3)).collect();
    let views = (0..2)
        .map(|i| (0..3).map(|j| (seq(format!("v{i}{j}"), 2 + j), (j % 2) as f64)).collect())
        .collect();
    (params, GradFixture { questions, views })
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub k: usize,
    /// Only cdviews depends on the threshold.
    pub threshold: Option<f64>,
    pub metric: String,
    pub value: f64,
}

pub const ABLATION_NOTE: &str =
    "# synthetic world: compare trends across rows; absolute values say nothing about real scenes";

/// Mean selected-view count and answer coverage for every strategy, `k` and
/// (for cdviews) threshold, over all questions of `worlds`.
pub fn ablation(
    worlds: &[World],
    params: &SelectorParams,
    ks: &[usize],
    thresholds: &[f64],
    seed: u64,
) -> Result<Vec<AblationRow>, CliError> {
    let mut selector: HashMap<String, Vec<f64>> = HashMap::new();
    let mut retrieval: HashMap<String, Vec<f64>> = HashMap::new();
    for w in worlds {
        let views = w.store.scene_views(&w.scene.manifest)?;
        for qa in &w.scene.qa {
            let id = qa.qa.question_id.clone();
            selector.insert(id.clone(), selector_scores(w, qa, params)?);
            retrieval.insert(id.clone(), embedding_similarity(&w.store.question_seq(&id)?, &views));
        }
    }
    let mut rows = Vec::new();
    let mut push = |strategy: &str, k: usize, threshold: Option<f64>, selected: f64, covered: f64, n: f64| {
        for (metric, v) in [("mean_selected", selected), ("coverage", covered)] {
            rows.push(AblationRow {
                strategy: strategy.into(),
                k,
                threshold,
                metric: metric.into(),
                value: v / n.max(1.0),
            });
        }
    };
    for &k in ks {
        let mut base = [(0.0, 0.0); 3];
        let mut n = 0.0;
        for w in worlds {
            for qa in &w.scene.qa {
                let id = &qa.qa.question_id;
                let u = select_uniform(&w.scene.manifest, id, k, question_seed(seed, id))?;
                let e = select_evenly_spaced(&w.scene.manifest, id, k)?;
                let r = select_scored(w, qa, &retrieval[id], &NmsConfig::new(0.0, k))?;
                for (acc, sel) in base.iter_mut().zip([&u.view_ids, &e.view_ids, &r.view_ids]) {
                    acc.0 += sel.len() as f64;
                    acc.1 += covers(qa, sel) as u8 as f64;
                }
                n += 1.0;
            }
        }
        for (name, (s, c)) in ["uniform", "evenly_spaced", "retrieval"].into_iter().zip(base) {
            push(name, k, None, s, c, n);
        }
        for &t in thresholds {
            let (mut s, mut c) = (0.0, 0.0);
            for w in worlds {
                for qa in &w.scene.qa {
                    let r = select_scored(w, qa, &selector[&qa.qa.question_id], &NmsConfig::new(t, k))?;
                    s += r.view_ids.len() as f64;
                    c += covers(qa, &r.view_ids) as u8 as f64;
                }
            }
            push("cdviews", k, Some(t), s, c, n);
        }
    }
    Ok(rows)
}

/// CSV with a leading `#` note line.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    let body = w.into_inner().map_err(|e| CliError::io(path, e))?;
    let mut bytes = format!("{ABLATION_NOTE}\n").into_bytes();
    bytes.extend(body);
    viewsel_core::fsutil::write_atomic(path, &bytes).map_err(|e| CliError::io(path, e))
}

/// Coverage table: one line per (strategy, k, threshold), tab separated.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy\tk\tthreshold\tmean_selected\tcoverage\n");
    for pair in rows.chunks(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let t = a.threshold.map(|t| format!("{t}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!("{}\t{}\t{t}\t{:.3}\t{:.4}\n", a.strategy, a.k, a.value, b.value));
    }
    out
}
