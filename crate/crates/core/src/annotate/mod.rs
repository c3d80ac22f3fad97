//! Automatic view labels from question-answer pairs. Each pair is first
//! rephrased into a caption; every candidate view is then shown to the
//! model with that caption and three options: A (matches), B (does not
//! match), C (cannot tell). Unparseable replies count as C.

mod template;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use template::{PromptTemplate, TemplateRole, TemplateSet};

use crate::fsutil::sha256_hex;
use crate::gateway::{ChatRequest, Gateway, GatewayError, Part};
use crate::label::Label;
use crate::scene::{QAInstance, SceneManifest};

pub const PARSE_RULE: &str = "first-standalone-abc";
pub const DEFAULT_VIEWS_PER_SCENE: usize = 64;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("model returned an empty caption for `{0}`")]
    EmptyCompletion(String),
    #[error("template: {0}")]
    Template(String),
    #[error("question `{question_id}` references unknown scene `{scene_id}`")]
    MissingScene { question_id: String, scene_id: String },
    #[error("view `{0}` has no image")]
    MissingImage(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl AnnotateError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        AnnotateError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub caption_id: String,
    pub question_id: String,
    pub answer: String,
    pub model: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewLabel {
    pub value: Label,
    pub raw: String,
    pub rule: String,
}

/// One row of the labels file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledView {
    pub scene_id: String,
    pub question_id: String,
    pub view_id: String,
    pub label: Label,
    pub caption_id: Option<String>,
    pub raw_reply_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Maps a reply to a label by its first standalone `A`, `B` or `C`
/// (either case). Anything else is uncertain.
pub fn parse_label(reply: &str) -> Label {
    let chars: Vec<char> = reply.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let label = match c {
            'A' | 'a' => Label::Positive,
            'B' | 'b' => Label::Negative,
            'C' | 'c' => Label::Uncertain,
            _ => continue,
        };
        let before = i == 0 || !chars[i - 1].is_alphanumeric();
        let after = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if before && after {
            return label;
        }
    }
    Label::Uncertain
}

fn view_label(raw: String) -> ViewLabel {
    ViewLabel {
        value: parse_label(&raw),
        raw,
        rule: PARSE_RULE.to_string(),
    }
}

fn request_with(template: &PromptTemplate, model: &str, tag: &str, parts: Vec<Part>) -> ChatRequest {
    let mut req = ChatRequest::new(model, tag);
    if let Some(sys) = &template.system {
        req = req.system(sys.clone());
    }
    req.user(parts)
}

fn expect_role(template: &PromptTemplate, role: TemplateRole) -> Result<(), AnnotateError> {
    if template.role != role {
        return Err(AnnotateError::Template(format!(
            "expected a {} template, got {}",
            role.file_stem(),
            template.role.file_stem()
        )));
    }
    Ok(())
}

pub fn generate_caption(
    gateway: &Gateway,
    model: &str,
    question_id: &str,
    question: &str,
    answer: &str,
    template: &PromptTemplate,
) -> Result<Caption, AnnotateError> {
    expect_role(template, TemplateRole::Rephrase)?;
    let text = template.render(&[("question", question), ("answer", answer)])?;
    let reply = gateway.complete(&request_with(template, model, "caption", vec![Part::text(text)]))?;
    if reply.text.trim().is_empty() {
        return Err(AnnotateError::EmptyCompletion(question_id.to_string()));
    }
    Ok(Caption {
        caption_id: format!("{question_id}:{}", &sha256_hex(reply.text.as_bytes())[..12]),
        question_id: question_id.to_string(),
        answer: answer.to_string(),
        model: model.to_string(),
        text: reply.text,
    })
}

pub fn match_view(
    gateway: &Gateway,
    model: &str,
    caption: &str,
    image: &Path,
    template: &PromptTemplate,
) -> Result<ViewLabel, AnnotateError> {
    expect_role(template, TemplateRole::Match)?;
    let text = template.render(&[("caption", caption)])?;
    let req = request_with(template, model, "match", vec![Part::image_path(image), Part::text(text)]);
    Ok(view_label(gateway.complete(&req)?.text))
}

/// Ablation variant: the question-answer pair stands in for the caption.
pub fn match_view_direct(
    gateway: &Gateway,
    model: &str,
    question: &str,
    answer: &str,
    image: &Path,
    template: &PromptTemplate,
) -> Result<ViewLabel, AnnotateError> {
    expect_role(template, TemplateRole::MatchDirect)?;
    let text = template.render(&[("question", question), ("answer", answer)])?;
    let req = request_with(template, model, "match_direct", vec![Part::image_path(image), Part::text(text)]);
    Ok(view_label(gateway.complete(&req)?.text))
}

/// Indices of at most `limit` views, evenly spaced over the scene.
pub fn candidate_views(n_views: usize, limit: usize) -> Vec<usize> {
    if limit == 0 || n_views <= limit {
        return (0..n_views).collect();
    }
    (0..limit).map(|j| j * n_views / limit).collect()
}

#[derive(Debug, Clone)]
pub struct AnnotateJob<'a> {
    pub qa: &'a [QAInstance],
    pub scenes: &'a BTreeMap<String, SceneManifest>,
    pub templates: &'a TemplateSet,
    pub model: &'a str,
    pub parallelism: usize,
    pub views_per_scene: usize,
    /// Match against the question-answer pair instead of a caption.
    pub direct: bool,
    pub labels_path: &'a Path,
    pub captions_path: &'a Path,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub questions: usize,
    pub captions_generated: usize,
    pub matches: usize,
    pub skipped_views: usize,
    pub positive: usize,
    pub negative: usize,
    pub uncertain: usize,
    pub view_errors: usize,
    pub failed_questions: usize,
}

/// Reads a JSONL file written line by line, dropping a torn final line.
fn read_resumable<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, AnnotateError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(AnnotateError::io(path, e)),
    };
    let mut rows = Vec::new();
    let mut valid = String::new();
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(line.trim_end()) {
            Ok(r) if line.ends_with('\n') => {
                rows.push(r);
                valid.push_str(line);
            }
            _ if i + 1 == lines.len() => {
                log::warn!("{}: dropping incomplete final line", path.display());
            }
            Ok(_) | Err(_) => {
                return Err(AnnotateError::io(path, format!("line {} is not a valid record", i + 1)));
            }
        }
    }
    if valid.len() != text.len() {
        crate::fsutil::write_atomic(path, valid.as_bytes()).map_err(|e| AnnotateError::io(path, e))?;
    }
    Ok(rows)
}

struct Sink {
    path: PathBuf,
    file: std::fs::File,
}

impl Sink {
    fn open(path: &Path) -> Result<Self, AnnotateError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| AnnotateError::io(parent, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| AnnotateError::io(path, e))?;
        Ok(Sink {
            path: path.to_path_buf(),
            file,
        })
    }

    fn write<T: Serialize>(&mut self, rows: &[T]) -> Result<(), AnnotateError> {
        let mut buf = String::new();
        for r in rows {
            buf.push_str(&serde_json::to_string(r).expect("row serializes"));
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes()).map_err(|e| AnnotateError::io(&self.path, e))?;
        self.file.flush().map_err(|e| AnnotateError::io(&self.path, e))
    }
}

/// Labels every candidate view of every question, appending to the labels
/// and captions files. Pairs already present in the labels file are
/// skipped, so an interrupted run resumes where it stopped.
pub fn annotate_dataset(job: &AnnotateJob<'_>, gateway: &Gateway) -> Result<AnnotateSummary, AnnotateError> {
    for q in job.qa {
        if !job.scenes.contains_key(&q.scene_id) {
            return Err(AnnotateError::MissingScene {
                question_id: q.question_id.clone(),
                scene_id: q.scene_id.clone(),
            });
        }
    }
    let existing: Vec<LabeledView> = read_resumable(job.labels_path)?;
    let done: HashSet<(String, String)> =
        existing.iter().map(|r| (r.question_id.clone(), r.view_id.clone())).collect();
    let mut captions: HashMap<String, Caption> = HashMap::new();
    if !job.direct {
        for c in read_resumable::<Caption>(job.captions_path)? {
            captions.insert(c.question_id.clone(), c);
        }
    }
    let mut labels_out = Sink::open(job.labels_path)?;
    let mut captions_out = if job.direct { None } else { Some(Sink::open(job.captions_path)?) };
    let mut summary = AnnotateSummary::default();
    let workers = job.parallelism.max(1);

    for qa in job.qa {
        summary.questions += 1;
        let scene = &job.scenes[&qa.scene_id];
        let answer = qa.answers.first().map(String::as_str).unwrap_or("");
        let candidates = candidate_views(scene.views.len(), job.views_per_scene);
        let pending: Vec<usize> = candidates
            .into_iter()
            .filter(|&i| {
                let skip = done.contains(&(qa.question_id.clone(), scene.views[i].view_id.clone()));
                summary.skipped_views += skip as usize;
                !skip
            })
            .collect();
        if pending.is_empty() {
            continue;
        }

        let caption = if job.direct {
            None
        } else if let Some(c) = captions.get(&qa.question_id) {
            Some(c.clone())
        } else {
            match generate_caption(gateway, job.model, &qa.question_id, &qa.question, answer, &job.templates.rephrase) {
                Ok(c) => {
                    summary.captions_generated += 1;
                    captions_out.as_mut().expect("caption sink").write(std::slice::from_ref(&c))?;
                    captions.insert(qa.question_id.clone(), c.clone());
                    Some(c)
                }
                Err(e) => {
                    log::warn!("caption for {} failed: {e}", qa.question_id);
                    summary.failed_questions += 1;
                    continue;
                }
            }
        };

        let results: Mutex<Vec<Option<LabeledView>>> = Mutex::new(vec![None; pending.len()]);
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..workers.min(pending.len()) {
                s.spawn(|| loop {
                    let slot = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&vi) = pending.get(slot) else { break };
                    let view = &scene.views[vi];
                    let outcome = match scene.image_path(vi) {
                        None => Err(AnnotateError::MissingImage(view.view_id.clone())),
                        Some(img) => match &caption {
                            Some(c) => match_view(gateway, job.model, &c.text, &img, &job.templates.match_caption),
                            None => match_view_direct(
                                gateway,
                                job.model,
                                &qa.question,
                                answer,
                                &img,
                                &job.templates.match_direct,
                            ),
                        },
                    };
                    let row = match outcome {
                        Ok(l) => LabeledView {
                            scene_id: qa.scene_id.clone(),
                            question_id: qa.question_id.clone(),
                            view_id: view.view_id.clone(),
                            label: l.value,
                            caption_id: caption.as_ref().map(|c| c.caption_id.clone()),
                            raw_reply_digest: sha256_hex(l.raw.as_bytes()),
                            error: None,
                        },
                        Err(e) => LabeledView {
                            scene_id: qa.scene_id.clone(),
                            question_id: qa.question_id.clone(),
                            view_id: view.view_id.clone(),
                            label: Label::Uncertain,
                            caption_id: caption.as_ref().map(|c| c.caption_id.clone()),
                            raw_reply_digest: sha256_hex(b""),
                            error: Some(e.to_string()),
                        },
                    };
                    results.lock().expect("results lock")[slot] = Some(row);
                });
            }
        });
        let rows: Vec<LabeledView> = results
            .into_inner()
            .expect("results lock")
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect();
        for r in &rows {
            summary.matches += 1;
            if r.error.is_some() {
                summary.view_errors += 1;
            }
            match r.label {
                Label::Positive => summary.positive += 1,
                Label::Negative => summary.negative += 1,
                Label::Uncertain => summary.uncertain += 1,
            }
        }
        labels_out.write(&rows)?;
    }
    Ok(summary)
}
