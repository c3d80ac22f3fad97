//! Writes a complete synthetic dataset: manifests with placeholder images,
//! QA and gold files, stand-in embeddings, oracle labels, a mock LVLM script
//! that answers from the oracle, and a ready-to-run config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use viewsel_core::fsutil::{sha256_hex, write_atomic};
use viewsel_core::gateway::{Matcher, MockScript, ScriptRule, ScriptedReply};
use viewsel_core::metrics::GoldRecord;
use viewsel_core::scene::{save_manifest, write_jsonl, EmbeddingStore, QAInstance, SyntheticQa, SyntheticScene};
use viewsel_core::selector::SelectorConfig;
use viewsel_core::Label;

use crate::config::{BackendKind, Paths, RunConfig};
use crate::error::CliError;
use crate::experiment::{make_world, oracle_label, WorldSpec};
use crate::provenance::{write_stamped, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub scenes: u64,
    pub seed: u64,
    pub prefix: String,
    pub world: WorldSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLabel {
    pub scene_id: String,
    pub question_id: String,
    pub view_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub scenes: usize,
    pub questions: usize,
    pub views: usize,
    pub run_config: PathBuf,
}

pub const BLURRY_REPLY: &str = "The image is too blurry to tell.";
pub const UNKNOWN_ANSWER: &str = "unknown";

fn image_rel(view_id: &str) -> String {
    format!("images/{view_id}.ppm")
}

/// 2x2 binary PPM whose pixels come from a hash of the scene and view, so
/// every view has distinct bytes.
fn placeholder_ppm(scene_id: &str, view_id: &str) -> Vec<u8> {
    let digest = sha256_hex(format!("{scene_id}/{view_id}").as_bytes());
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    bytes.extend_from_slice(&digest.as_bytes()[..12]);
    bytes
}

pub fn caption_text(scene: &SyntheticScene, qa: &SyntheticQa) -> String {
    format!(
        "The {} is next to the {}.",
        scene.objects[qa.anchor].label, scene.objects[qa.answer].label
    )
}

fn pair_text(qa: &QAInstance) -> String {
    format!("Question: {}\nAnswer: {}\n", qa.question, qa.answers[0])
}

fn rule(tag: &str, contains: Vec<String>, images: Vec<String>, reply: &str) -> Option<ScriptRule> {
    // an empty image_any list would match every image
    if images.is_empty() {
        return None;
    }
    Some(ScriptRule {
        when: Matcher {
            tag: Some(tag.into()),
            contains,
            image_any: images,
        },
        replies: vec![ScriptedReply::Plain(reply.into())],
    })
}

fn fallback(tag: &str, reply: &str) -> ScriptRule {
    ScriptRule {
        when: Matcher {
            tag: Some(tag.into()),
            ..Default::default()
        },
        replies: vec![ScriptedReply::Plain(reply.into())],
    }
}

/// Oracle-backed mock LVLM. Captions state the anchor and the answer; match
/// requests get A, B or C by the three-way oracle label of the view; answer
/// requests get the gold answer when some fed view is answer-bearing.
pub fn mock_script(scenes: &[SyntheticScene]) -> MockScript {
    let mut rules = Vec::new();
    let mut matches = Vec::new();
    let mut answers = Vec::new();
    for scene in scenes {
        let sid = &scene.manifest.scene_id;
        let suffix = |i: usize| format!("/{sid}/{}", image_rel(&scene.manifest.views[i].view_id));
        for qa in &scene.qa {
            let pair = pair_text(&qa.qa);
            let caption = caption_text(scene, qa);
            rules.push(ScriptRule {
                when: Matcher {
                    tag: Some("caption".into()),
                    contains: vec![pair.clone()],
                    image_any: vec![],
                },
                replies: vec![ScriptedReply::Plain(caption.clone())],
            });
            for (letter, label) in [("A", Label::Positive), ("B", Label::Negative), ("C", Label::Uncertain)] {
                let views: Vec<String> = (0..scene.manifest.views.len())
                    .filter(|&i| oracle_label(scene, qa, i) == label)
                    .map(suffix)
                    .collect();
                matches.extend(rule("match", vec![format!("Caption: {caption}\n")], views.clone(), letter));
                matches.extend(rule("match_direct", vec![pair.clone()], views, letter));
            }
            let bearing: Vec<String> = scene.answer_view_indices(qa).into_iter().map(suffix).collect();
            answers.extend(rule(
                "answer",
                vec![format!("Question: {}\n", qa.qa.question)],
                bearing,
                &qa.qa.answers[0],
            ));
        }
    }
    rules.extend(matches);
    rules.push(fallback("match", BLURRY_REPLY));
    rules.push(fallback("match_direct", BLURRY_REPLY));
    rules.extend(answers);
    rules.push(fallback("answer", UNKNOWN_ANSWER));
    MockScript {
        image_limit: None,
        rules,
    }
}

/// The config `synth` drops next to its output; every path is relative to it.
pub fn run_config(world: &WorldSpec) -> RunConfig {
    let p = |s: &str| Some(PathBuf::from(s));
    let mut cfg = RunConfig {
        paths: Paths {
            scenes_dir: p("scenes"),
            qa: p("qa.jsonl"),
            gold: p("gold.jsonl"),
            embeddings: p("embeddings.json"),
            labels: p("labels.jsonl"),
            captions: p("captions.jsonl"),
            params: p("selector.params"),
            cache_dir: p("cache"),
            templates: None,
            retrieval_scores: None,
            selections: p("selections.jsonl"),
            answers: p("answers.jsonl"),
        },
        ..Default::default()
    };
    cfg.gateway.backend = BackendKind::Mock;
    cfg.gateway.mock_script = p("mock_script.json");
    cfg.annotate.views_per_scene = world.n_views;
    cfg.training.selector = SelectorConfig {
        d_in: world.d_in,
        ..SelectorConfig::desk()
    };
    cfg
}

pub fn write_dataset(out: &Path, opts: &SynthOptions) -> Result<SynthSummary, CliError> {
    let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e));
    mk(out)?;
    let mut scenes = Vec::new();
    let mut store: Option<EmbeddingStore> = None;
    for s in opts.seed..opts.seed + opts.scenes {
        let world = make_world(&opts.world, &opts.prefix, s)?;
        match store.as_mut() {
            None => store = Some(world.store),
            Some(st) => st.merge(world.store)?,
        }
        scenes.push(world.scene);
    }
    let store = store.ok_or_else(|| CliError::Config("--scenes must be at least 1".into()))?;

    let mut qa = Vec::new();
    let mut gold = Vec::new();
    let mut labels = Vec::new();
    let mut n_views = 0;
    for scene in &mut scenes {
        let sid = scene.manifest.scene_id.clone();
        let dir = out.join("scenes").join(&sid);
        mk(&dir.join("images"))?;
        for v in &mut scene.manifest.views {
            let rel = image_rel(&v.view_id);
            let path = dir.join(&rel);
            write_atomic(&path, &placeholder_ppm(&sid, &v.view_id)).map_err(|e| CliError::io(&path, e))?;
            v.image_path = Some(rel);
        }
        save_manifest(&scene.manifest, &dir.join("manifest.json"))?;
        n_views += scene.manifest.views.len();
        for q in &scene.qa {
            qa.push(q.qa.clone());
            gold.push(GoldRecord {
                question_id: q.qa.question_id.clone(),
                answers: q.qa.answers.clone(),
            });
            for (i, v) in scene.manifest.views.iter().enumerate() {
                labels.push(OracleLabel {
                    scene_id: sid.clone(),
                    question_id: q.qa.question_id.clone(),
                    view_id: v.view_id.clone(),
                    label: oracle_label(scene, q, i),
                });
            }
        }
    }
    write_jsonl(&out.join("qa.jsonl"), &qa)?;
    write_jsonl(&out.join("gold.jsonl"), &gold)?;
    write_jsonl(&out.join("oracle_labels.jsonl"), &labels)?;
    store.save(&out.join("embeddings.json"))?;

    let script = serde_json::to_string_pretty(&mock_script(&scenes)).expect("script serializes");
    let script_path = out.join("mock_script.json");
    write_atomic(&script_path, script.as_bytes()).map_err(|e| CliError::io(&script_path, e))?;

    let provenance = Provenance::new("synth", opts);
    let world_path = out.join("world.json");
    write_stamped(&world_path, &provenance, opts).map_err(|e| CliError::io(&world_path, e))?;

    let cfg_path = out.join("run.json");
    let text = serde_json::to_string_pretty(&run_config(&opts.world)).expect("config serializes");
    write_atomic(&cfg_path, text.as_bytes()).map_err(|e| CliError::io(&cfg_path, e))?;

    Ok(SynthSummary {
        scenes: scenes.len(),
        questions: qa.len(),
        views: n_views,
        run_config: cfg_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_images_differ() {
        let a = placeholder_ppm("s", "000");
        let b = placeholder_ppm("s", "001");
        assert_ne!(a, b);
        assert!(a.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(a.len(), 11 + 12);
    }
}
