//! The pipeline stages behind `annotate`, `train`, `select`, `answer` and
//! `eval`, driven by a resolved [`RunConfig`].

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use viewsel_core::annotate::{annotate_dataset, AnnotateJob, AnnotateSummary, LabeledView, TemplateSet};
use viewsel_core::fsutil::sha256_hex;
use viewsel_core::gateway::{
    answer_question, Backend, Gateway, GatewayStats, HttpBackend, MockBackend, MockScript, ResponseCache, RetryPolicy,
};
use viewsel_core::metrics::{evaluate_run, AnswerRecord, MetricsReport};
use viewsel_core::scene::{load_manifest, read_jsonl, write_jsonl, EmbeddingStore, QAInstance, SceneManifest};
use viewsel_core::selector::{
    evaluate_auc, load_params, save_params, train_selector, LabeledEmbedding, TrainInstance, TrainStats,
};
use viewsel_core::strategy::{
    embedding_similarity, load_retrieval_scores, question_seed, select_cdviews, select_evenly_spaced,
    select_retrieval, select_uniform, SelectionResult, Strategy,
};
use viewsel_core::NmsConfig;

use crate::config::{diagnose, has_errors, BackendKind, RunConfig, Stage};
use crate::error::CliError;
use crate::provenance::{write_stamped, Provenance};

/// Refuses to start a stage whose config has errors; warnings go to stderr.
pub fn preflight(cfg: &RunConfig, stage: Stage) -> Result<(), CliError> {
    let diags = diagnose(cfg, stage);
    for d in &diags {
        eprintln!("{d}");
    }
    if has_errors(&diags) {
        return Err(CliError::Config(format!("{} error(s) in the run config", diags.iter().filter(|d| d.severity == crate::config::Severity::Error).count())));
    }
    Ok(())
}

fn required<'a>(cfg: &'a RunConfig, field: &str) -> Result<&'a Path, CliError> {
    cfg.paths
        .lookup(field)
        .ok_or_else(|| CliError::Config(format!("paths.{field} is required")))
}

pub fn load_qa(path: &Path) -> Result<Vec<QAInstance>, CliError> {
    let qa: Vec<QAInstance> = read_jsonl(path)?;
    for q in &qa {
        q.validate()?;
    }
    Ok(qa)
}

/// Manifests of every scene the questions mention, from
/// `<scenes_dir>/<scene_id>/manifest.json`.
pub fn load_scenes<'a>(
    scenes_dir: &Path,
    ids: impl IntoIterator<Item = &'a str>,
) -> Result<BTreeMap<String, SceneManifest>, CliError> {
    let mut out = BTreeMap::new();
    for id in ids {
        if !out.contains_key(id) {
            let m = load_manifest(&scenes_dir.join(id).join("manifest.json"))?;
            m.validate()?;
            out.insert(id.to_string(), m);
        }
    }
    Ok(out)
}

pub fn build_gateway(cfg: &RunConfig) -> Result<Gateway, CliError> {
    let g = &cfg.gateway;
    let backend: Arc<dyn Backend> = match g.backend {
        BackendKind::Mock => {
            let path = g
                .mock_script
                .as_deref()
                .ok_or_else(|| CliError::Config("gateway.mock_script is required".into()))?;
            Arc::new(MockBackend::new(MockScript::load(path)?))
        }
        BackendKind::Http => {
            let url = g
                .base_url
                .as_deref()
                .ok_or_else(|| CliError::Config("gateway.base_url is required".into()))?;
            Arc::new(HttpBackend::new(url, &g.token_env, g.image_limit, Duration::from_secs(g.timeout_secs))?)
        }
    };
    let cache = match &cfg.paths.cache_dir {
        Some(dir) => ResponseCache::on_disk(dir.clone()),
        None => ResponseCache::in_memory(),
    };
    Ok(Gateway::new(Some(backend), cache)
        .with_retry(RetryPolicy {
            base_delay: Duration::from_millis(g.retry_base_ms),
            factor: 2.0,
            max_attempts: g.max_attempts,
        })
        .with_rate_limit(g.rate_limit_per_minute)
        .with_image_limit(g.image_limit))
}

pub fn templates(cfg: &RunConfig) -> Result<TemplateSet, CliError> {
    Ok(match &cfg.paths.templates {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::default(),
    })
}

fn sidecar(cfg: &RunConfig, stage: &str, artifact: &Path) -> Result<(), CliError> {
    Provenance::new(stage, cfg)
        .write_sidecar(artifact)
        .map(|_| ())
        .map_err(|e| CliError::io(artifact, e))
}

pub fn annotate(cfg: &RunConfig) -> Result<(AnnotateSummary, GatewayStats), CliError> {
    preflight(cfg, Stage::Annotate)?;
    let qa = load_qa(required(cfg, "qa")?)?;
    let scenes = load_scenes(required(cfg, "scenes_dir")?, qa.iter().map(|q| q.scene_id.as_str()))?;
    let templates = templates(cfg)?;
    let gateway = build_gateway(cfg)?;
    let labels_path = required(cfg, "labels")?;
    let captions_path: PathBuf = match cfg.paths.captions.clone() {
        Some(p) => p,
        None => labels_path.with_extension("captions.jsonl"),
    };
    let job = AnnotateJob {
        qa: &qa,
        scenes: &scenes,
        templates: &templates,
        model: &cfg.gateway.model,
        parallelism: cfg.gateway.parallelism,
        views_per_scene: cfg.annotate.views_per_scene,
        direct: cfg.annotate.direct,
        labels_path,
        captions_path: &captions_path,
    };
    let summary = annotate_dataset(&job, &gateway)?;
    sidecar(cfg, "annotate", labels_path)?;
    if !cfg.annotate.direct {
        sidecar(cfg, "annotate", &captions_path)?;
    }
    Ok((summary, gateway.stats()))
}

/// Scene-level split: a scene is held out when the leading 64 bits of the
/// SHA-256 of its id fall below `fraction` of the range.
pub fn is_holdout(scene_id: &str, fraction: f64) -> bool {
    let digest = sha256_hex(scene_id.as_bytes());
    let v = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
    (v as f64) < fraction * (u64::MAX as f64)
}

/// Training instances from annotator labels, in question-file order with
/// views sorted by id. Rows carrying an annotation error are dropped.
pub fn label_instances(
    qa: &[QAInstance],
    labels: &[LabeledView],
    store: &EmbeddingStore,
) -> Result<Vec<(String, TrainInstance)>, CliError> {
    let mut by_question: HashMap<&str, Vec<&LabeledView>> = HashMap::new();
    for l in labels.iter().filter(|l| l.error.is_none()) {
        by_question.entry(l.question_id.as_str()).or_default().push(l);
    }
    let mut out = Vec::new();
    for q in qa {
        let Some(rows) = by_question.get_mut(q.question_id.as_str()) else { continue };
        rows.sort_by(|a, b| a.view_id.cmp(&b.view_id));
        let mut views = Vec::with_capacity(rows.len());
        for r in rows.iter() {
            views.push(LabeledEmbedding {
                view: store.view_seq(&r.scene_id, &r.view_id)?,
                label: r.label,
            });
        }
        out.push((
            q.scene_id.clone(),
            TrainInstance {
                question: store.question_seq(&q.question_id)?,
                views,
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_questions: usize,
    pub holdout_questions: usize,
    pub holdout_scenes: Vec<String>,
    pub initial_holdout_auc: Option<f64>,
    pub stats: TrainStats,
}

pub fn stats_path(params: &Path) -> PathBuf {
    params.with_extension("stats.json")
}

pub fn train(cfg: &RunConfig) -> Result<TrainReport, CliError> {
    preflight(cfg, Stage::Train)?;
    let qa = load_qa(required(cfg, "qa")?)?;
    let labels: Vec<LabeledView> = read_jsonl(required(cfg, "labels")?)?;
    let store = EmbeddingStore::load(required(cfg, "embeddings")?)?;
    let model = cfg.training.selector;
    if store.d_in() != model.d_in {
        return Err(CliError::Config(format!(
            "training.selector.d_in = {} but the embeddings have d_in = {}",
            model.d_in,
            store.d_in()
        )));
    }
    let all = label_instances(&qa, &labels, &store)?;
    let fraction = cfg.training.holdout_fraction;
    let mut holdout_scenes: Vec<String> = Vec::new();
    let (mut train_set, mut holdout) = (Vec::new(), Vec::new());
    for (scene, inst) in all {
        if is_holdout(&scene, fraction) {
            if !holdout_scenes.contains(&scene) {
                holdout_scenes.push(scene);
            }
            holdout.push(inst);
        } else {
            train_set.push(inst);
        }
    }
    let holdout_ref = (!holdout.is_empty()).then_some(holdout.as_slice());
    let initial = match holdout_ref {
        Some(h) => evaluate_auc(&viewsel_core::selector::SelectorParams::init(model), h)?,
        None => None,
    };
    let (params, stats) = train_selector(&train_set, model, &cfg.training.train, holdout_ref)?;
    let params_path = required(cfg, "params")?;
    if let Some(parent) = params_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    save_params(&params, params_path)?;
    sidecar(cfg, "train", params_path)?;
    let report = TrainReport {
        train_questions: train_set.len(),
        holdout_questions: holdout.len(),
        holdout_scenes,
        initial_holdout_auc: initial,
        stats,
    };
    let sp = stats_path(params_path);
    write_stamped(&sp, &Provenance::new("train", cfg), &report).map_err(|e| CliError::io(&sp, e))?;
    Ok(report)
}

pub fn select(cfg: &RunConfig) -> Result<Vec<SelectionResult>, CliError> {
    preflight(cfg, Stage::Select)?;
    let qa = load_qa(required(cfg, "qa")?)?;
    let scenes = load_scenes(required(cfg, "scenes_dir")?, qa.iter().map(|q| q.scene_id.as_str()))?;
    let s = &cfg.strategy;
    let store = match (s.name, &cfg.paths.retrieval_scores) {
        (Strategy::Cdviews, _) | (Strategy::Retrieval, None) => Some(EmbeddingStore::load(required(cfg, "embeddings")?)?),
        _ => None,
    };
    let params = match s.name {
        Strategy::Cdviews => Some(load_params(required(cfg, "params")?)?),
        _ => None,
    };
    let table = match (s.name, &cfg.paths.retrieval_scores) {
        (Strategy::Retrieval, Some(p)) => Some(load_retrieval_scores(p)?),
        _ => None,
    };
    let mut view_cache: HashMap<&str, Vec<viewsel_core::selector::EmbeddingSeq>> = HashMap::new();
    let mut out = Vec::with_capacity(qa.len());
    for q in &qa {
        let scene = &scenes[&q.scene_id];
        let qid = q.question_id.as_str();
        let r = match s.name {
            Strategy::Uniform => select_uniform(scene, qid, s.k, question_seed(s.seed, qid))?,
            Strategy::EvenlySpaced => select_evenly_spaced(scene, qid, s.k)?,
            Strategy::Retrieval => {
                let scores: HashMap<String, f64> = match &table {
                    Some(t) => t
                        .get(&(q.scene_id.clone(), q.question_id.clone()))
                        .cloned()
                        .ok_or_else(|| CliError::Data(format!("no retrieval scores for question `{qid}`")))?,
                    None => {
                        let store = store.as_ref().expect("store loaded");
                        let views = store.scene_views(scene)?;
                        let sims = embedding_similarity(&store.question_seq(qid)?, &views);
                        scene.views.iter().map(|v| v.view_id.clone()).zip(sims).collect()
                    }
                };
                select_retrieval(scene, qid, s.k, &scores)?
            }
            Strategy::Cdviews => {
                let store = store.as_ref().expect("store loaded");
                if !view_cache.contains_key(q.scene_id.as_str()) {
                    view_cache.insert(q.scene_id.as_str(), store.scene_views(scene)?);
                }
                let views = &view_cache[q.scene_id.as_str()];
                let question = store.question_seq(qid)?;
                let nms = NmsConfig::new(s.threshold, s.k);
                select_cdviews(scene, qid, &question, views, params.as_ref().expect("params loaded"), &nms, s.k)?
            }
        };
        out.push(r);
    }
    let path = required(cfg, "selections")?;
    write_jsonl(path, &out)?;
    sidecar(cfg, "select", path)?;
    Ok(out)
}

pub fn answer(cfg: &RunConfig) -> Result<(Vec<AnswerRecord>, GatewayStats), CliError> {
    preflight(cfg, Stage::Answer)?;
    let qa = load_qa(required(cfg, "qa")?)?;
    let questions: HashMap<&str, &QAInstance> = qa.iter().map(|q| (q.question_id.as_str(), q)).collect();
    let selections: Vec<SelectionResult> = read_jsonl(required(cfg, "selections")?)?;
    let scenes = load_scenes(required(cfg, "scenes_dir")?, selections.iter().map(|s| s.scene_id.as_str()))?;
    let mut jobs = Vec::with_capacity(selections.len());
    for sel in &selections {
        let q = questions
            .get(sel.question_id.as_str())
            .ok_or_else(|| CliError::Data(format!("selection for unknown question `{}`", sel.question_id)))?;
        let scene = &scenes[&sel.scene_id];
        let mut images = Vec::with_capacity(sel.feed_order.len());
        for id in &sel.feed_order {
            let i = scene
                .view_index(id)
                .ok_or_else(|| CliError::Data(format!("scene `{}` has no view `{id}`", sel.scene_id)))?;
            images.push(
                scene
                    .image_path(i)
                    .ok_or_else(|| CliError::Data(format!("view `{id}` of `{}` has no image", sel.scene_id)))?,
            );
        }
        jobs.push((q.question_id.clone(), q.question.clone(), images));
    }

    let templates = templates(cfg)?;
    let gateway = build_gateway(cfg)?;
    let model = cfg.gateway.model.as_str();
    let results: Mutex<Vec<Option<Result<String, CliError>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..cfg.gateway.parallelism.max(1).min(jobs.len()) {
            s.spawn(|| loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some((_, question, images)) = jobs.get(slot) else { break };
                let r = answer_question(&gateway, model, images, question, &templates.answer).map_err(CliError::from);
                results.lock().expect("results lock")[slot] = Some(r);
            });
        }
    });
    let mut answers = Vec::with_capacity(jobs.len());
    for ((qid, _, _), r) in jobs.iter().zip(results.into_inner().expect("results lock")) {
        let text = r.expect("every slot filled")?;
        answers.push(AnswerRecord {
            question_id: qid.clone(),
            answer: text.trim().to_string(),
        });
    }
    let path = required(cfg, "answers")?;
    write_jsonl(path, &answers)?;
    sidecar(cfg, "answer", path)?;
    Ok((answers, gateway.stats()))
}

pub fn eval(cfg: &RunConfig) -> Result<MetricsReport, CliError> {
    preflight(cfg, Stage::Eval)?;
    Ok(evaluate_run(required(cfg, "answers")?, required(cfg, "gold")?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_split_is_stable_and_proportional() {
        let held = (0..2000).filter(|i| is_holdout(&format!("scene{i}"), 0.1)).count();
        assert!((150..250).contains(&held), "{held}");
        assert!(!is_holdout("anything", 0.0));
        assert_eq!(is_holdout("scene7", 0.3), is_holdout("scene7", 0.3));
    }
}
