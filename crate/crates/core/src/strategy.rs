//! View selection strategies behind one result type: seeded uniform
//! sampling, an evenly spaced deterministic variant, retrieval by
//! precomputed similarity, and learned scoring followed by pose NMS.
//!
//! Whatever the strategy, `feed_order` lists the chosen views by ascending
//! frame index; that is the order handed to the answering model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nms::{view_nms, NmsConfig, NmsError};
use crate::scene::{read_jsonl, SceneError, SceneManifest};
use crate::selector::{score_views, EmbeddingSeq, SelectorError, SelectorParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    /// Frames at `floor(j * N / k)`. Deterministic plumbing, not a random baseline.
    EvenlySpaced,
    Retrieval,
    Cdviews,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::EvenlySpaced => "evenly_spaced",
            Strategy::Retrieval => "retrieval",
            Strategy::Cdviews => "cdviews",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "evenly_spaced" | "evenly-spaced" => Ok(Strategy::EvenlySpaced),
            "retrieval" => Ok(Strategy::Retrieval),
            "cdviews" => Ok(Strategy::Cdviews),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("k = {k} exceeds the {n} views of the scene")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("scene `{0}` has no views")]
    EmptyScene(String),
    #[error("no similarity score for view `{0}`")]
    MissingScore(String),
    #[error("similarity score for view `{0}` is not finite")]
    NonFiniteScore(String),
    #[error("k = {k} disagrees with the NMS budget {max_views}")]
    InconsistentK { k: usize, max_views: usize },
    #[error("{views} view embeddings for {expected} views")]
    ViewCountMismatch { views: usize, expected: usize },
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Nms(#[from] NmsError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub scene_id: String,
    pub question_id: String,
    pub strategy: Strategy,
    /// Chosen views in selection order (best first for scored strategies).
    pub view_ids: Vec<String>,
    /// Score of each entry in `view_ids`; absent for unscored strategies.
    pub scores: Option<Vec<f64>>,
    /// `view_ids` sorted by ascending frame index.
    pub feed_order: Vec<String>,
}

impl SelectionResult {
    fn build(
        scene: &SceneManifest,
        question_id: &str,
        strategy: Strategy,
        indices: &[usize],
        scores: Option<Vec<f64>>,
    ) -> Self {
        let mut by_frame = indices.to_vec();
        by_frame.sort_by_key(|&i| (scene.views[i].frame_index, i));
        SelectionResult {
            scene_id: scene.scene_id.clone(),
            question_id: question_id.to_string(),
            strategy,
            view_ids: indices.iter().map(|&i| scene.views[i].view_id.clone()).collect(),
            scores,
            feed_order: by_frame.iter().map(|&i| scene.views[i].view_id.clone()).collect(),
        }
    }
}

fn check_k(scene: &SceneManifest, k: usize) -> Result<(), StrategyError> {
    if k == 0 {
        return Err(StrategyError::ZeroK);
    }
    if scene.views.is_empty() {
        return Err(StrategyError::EmptyScene(scene.scene_id.clone()));
    }
    if k > scene.views.len() {
        return Err(StrategyError::KTooLarge {
            k,
            n: scene.views.len(),
        });
    }
    Ok(())
}

/// Per-question seed so that uniform draws differ across questions of one
/// scene yet stay reproducible.
pub fn question_seed(base_seed: u64, question_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(question_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// `k` distinct views drawn uniformly without replacement.
pub fn select_uniform(
    scene: &SceneManifest,
    question_id: &str,
    k: usize,
    seed: u64,
) -> Result<SelectionResult, StrategyError> {
    check_k(scene, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, scene.views.len(), k).into_vec();
    Ok(SelectionResult::build(scene, question_id, Strategy::Uniform, &picked, None))
}

pub fn select_evenly_spaced(
    scene: &SceneManifest,
    question_id: &str,
    k: usize,
) -> Result<SelectionResult, StrategyError> {
    check_k(scene, k)?;
    let n = scene.views.len();
    let picked: Vec<usize> = (0..k).map(|j| j * n / k).collect();
    Ok(SelectionResult::build(scene, question_id, Strategy::EvenlySpaced, &picked, None))
}

/// Top-k views by similarity; ties go to the earlier frame.
pub fn select_retrieval(
    scene: &SceneManifest,
    question_id: &str,
    k: usize,
    scores: &HashMap<String, f64>,
) -> Result<SelectionResult, StrategyError> {
    check_k(scene, k)?;
    let mut table = Vec::with_capacity(scene.views.len());
    for (i, v) in scene.views.iter().enumerate() {
        let s = *scores
            .get(&v.view_id)
            .ok_or_else(|| StrategyError::MissingScore(v.view_id.clone()))?;
        if !s.is_finite() {
            return Err(StrategyError::NonFiniteScore(v.view_id.clone()));
        }
        table.push((i, s));
    }
    table.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(scene.views[a.0].frame_index.cmp(&scene.views[b.0].frame_index))
    });
    table.truncate(k);
    let picked: Vec<usize> = table.iter().map(|t| t.0).collect();
    let s: Vec<f64> = table.iter().map(|t| t.1).collect();
    Ok(SelectionResult::build(scene, question_id, Strategy::Retrieval, &picked, Some(s)))
}

/// Selector scores followed by pose NMS. `views` must align with
/// `scene.views`.
pub fn select_cdviews(
    scene: &SceneManifest,
    question_id: &str,
    question: &EmbeddingSeq,
    views: &[EmbeddingSeq],
    params: &SelectorParams,
    nms_config: &NmsConfig,
    k: usize,
) -> Result<SelectionResult, StrategyError> {
    if k == 0 {
        return Err(StrategyError::ZeroK);
    }
    if k != nms_config.max_views {
        return Err(StrategyError::InconsistentK {
            k,
            max_views: nms_config.max_views,
        });
    }
    if views.len() != scene.views.len() {
        return Err(StrategyError::ViewCountMismatch {
            views: views.len(),
            expected: scene.views.len(),
        });
    }
    if scene.views.is_empty() {
        return Err(StrategyError::EmptyScene(scene.scene_id.clone()));
    }
    let out = score_views(question, views, params)?;
    let poses = scene.poses();
    let nms = view_nms(&poses, &out.scores, nms_config)?;
    Ok(SelectionResult::build(scene, question_id, Strategy::Cdviews, &nms.selected, Some(nms.scores)))
}

/// Embedding fallback for retrieval: cosine of mean-pooled question and
/// view tokens.
pub fn embedding_similarity(question: &EmbeddingSeq, views: &[EmbeddingSeq]) -> Vec<f64> {
    let q = question.tokens.mean_axis(ndarray::Axis(0)).expect("non-empty question");
    let qn = q.dot(&q).sqrt();
    views
        .iter()
        .map(|v| {
            let m = v.tokens.mean_axis(ndarray::Axis(0)).expect("non-empty view");
            let denom = qn * m.dot(&m).sqrt();
            if denom > 0.0 {
                q.dot(&m) / denom
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScore {
    pub scene_id: String,
    pub question_id: String,
    pub view_id: String,
    pub score: f64,
}

/// Retrieval scores keyed by `(scene_id, question_id)`, then view id.
pub type RetrievalTable = BTreeMap<(String, String), HashMap<String, f64>>;

pub fn load_retrieval_scores(path: &Path) -> Result<RetrievalTable, SceneError> {
    let rows: Vec<RetrievalScore> = read_jsonl(path)?;
    let mut table = RetrievalTable::new();
    for r in rows {
        table
            .entry((r.scene_id, r.question_id))
            .or_default()
            .insert(r.view_id, r.score);
    }
    Ok(table)
}
