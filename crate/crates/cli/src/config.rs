//! Run configuration: one JSON document, `${VAR}` interpolation, flag
//! overrides applied by the caller, and cross-field diagnostics.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use viewsel_core::selector::{SelectorConfig, TrainConfig};
use viewsel_core::strategy::Strategy;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `<scene_id>/manifest.json`.
    pub scenes_dir: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    /// Embedding index JSON (the `.vemb` files sit next to it).
    pub embeddings: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub retrieval_scores: Option<PathBuf>,
    pub selections: Option<PathBuf>,
    pub answers: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySettings {
    pub name: Strategy,
    pub k: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for StrategySettings {
    fn default() -> Self {
        StrategySettings {
            name: Strategy::Cdviews,
            k: 9,
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub backend: BackendKind,
    pub mock_script: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: String,
    /// Name of the variable holding the bearer token; the token itself never
    /// enters the config.
    pub token_env: String,
    pub rate_limit_per_minute: Option<u32>,
    pub parallelism: usize,
    pub image_limit: Option<usize>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub retry_base_ms: u64,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        GatewaySettings {
            backend: BackendKind::Mock,
            mock_script: None,
            base_url: None,
            model: "mock-lvlm".into(),
            token_env: viewsel_core::gateway::DEFAULT_TOKEN_ENV.into(),
            rate_limit_per_minute: None,
            parallelism: 4,
            image_limit: None,
            timeout_secs: 120,
            max_attempts: 5,
            retry_base_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateSettings {
    pub views_per_scene: usize,
    pub direct: bool,
}

impl Default for AnnotateSettings {
    fn default() -> Self {
        AnnotateSettings {
            views_per_scene: viewsel_core::annotate::DEFAULT_VIEWS_PER_SCENE,
            direct: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub selector: SelectorConfig,
    pub train: TrainConfig,
    /// Fraction of scenes held out for AUC tracking.
    pub holdout_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            selector: SelectorConfig::desk(),
            train: TrainConfig::default(),
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    /// Include BLEU-1, ROUGE-L and CIDEr next to EM@1.
    pub text_metrics: bool,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings { text_metrics: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub strategy: StrategySettings,
    pub gateway: GatewaySettings,
    pub annotate: AnnotateSettings,
    pub training: TrainSettings,
    pub metrics: MetricSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{level}: {}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("${{{name}}} is not set")]
    UnsetVariable { name: String },
    #[error("unterminated ${{ in config text")]
    Unterminated,
}

/// Replaces every `${NAME}` with the value of that environment variable;
/// `$$` is a literal dollar.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('$') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos + 1..];
        if let Some(after) = tail.strip_prefix('$') {
            out.push('$');
            rest = after;
        } else if let Some(body) = tail.strip_prefix('{') {
            let end = body.find('}').ok_or(ConfigError::Unterminated)?;
            let name = &body[..end];
            let value = lookup(name).ok_or_else(|| ConfigError::UnsetVariable { name: name.to_string() })?;
            out.push_str(&value);
            rest = &body[end + 1..];
        } else {
            out.push('$');
            rest = tail;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Parses config text after interpolation. Relative paths resolve against
/// `base` (the config file's directory).
pub fn parse_config(
    text: &str,
    origin: &Path,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<RunConfig, ConfigError> {
    let text = interpolate(text, lookup)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: origin.to_path_buf(),
        message: format!("{}: {}", e.path(), e.inner()),
    })?;
    if let Some(base) = origin.parent() {
        cfg.paths.resolve_against(base);
        if let Some(p) = cfg.gateway.mock_script.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_config(&text, path, |name| std::env::var(name).ok())
}

impl Paths {
    fn fields_mut(&mut self) -> [(&'static str, &mut Option<PathBuf>); 12] {
        [
            ("scenes_dir", &mut self.scenes_dir),
            ("qa", &mut self.qa),
            ("gold", &mut self.gold),
            ("embeddings", &mut self.embeddings),
            ("labels", &mut self.labels),
            ("captions", &mut self.captions),
            ("params", &mut self.params),
            ("cache_dir", &mut self.cache_dir),
            ("templates", &mut self.templates),
            ("retrieval_scores", &mut self.retrieval_scores),
            ("selections", &mut self.selections),
            ("answers", &mut self.answers),
        ]
    }

    fn resolve_against(&mut self, base: &Path) {
        for (_, p) in self.fields_mut() {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    pub fn lookup(&self, field: &str) -> Option<&Path> {
        match field {
            "scenes_dir" => self.scenes_dir.as_deref(),
            "qa" => self.qa.as_deref(),
            "gold" => self.gold.as_deref(),
            "embeddings" => self.embeddings.as_deref(),
            "labels" => self.labels.as_deref(),
            "captions" => self.captions.as_deref(),
            "params" => self.params.as_deref(),
            "cache_dir" => self.cache_dir.as_deref(),
            "templates" => self.templates.as_deref(),
            "retrieval_scores" => self.retrieval_scores.as_deref(),
            "selections" => self.selections.as_deref(),
            "answers" => self.answers.as_deref(),
            _ => None,
        }
    }
}

/// What a subcommand reads (must exist) and writes (parent must exist or be
/// creatable).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Annotate,
    Train,
    Select,
    Answer,
    Eval,
}

impl Stage {
    fn inputs(self, cfg: &RunConfig) -> Vec<&'static str> {
        match self {
            Stage::Annotate => vec!["scenes_dir", "qa"],
            Stage::Train => vec!["qa", "embeddings", "labels"],
            Stage::Select => {
                let mut v = vec!["scenes_dir", "qa"];
                match cfg.strategy.name {
                    Strategy::Cdviews => v.extend(["embeddings", "params"]),
                    Strategy::Retrieval if cfg.paths.retrieval_scores.is_some() => v.push("retrieval_scores"),
                    Strategy::Retrieval => v.push("embeddings"),
                    _ => {}
                }
                v
            }
            Stage::Answer => vec!["scenes_dir", "qa", "selections"],
            Stage::Eval => vec!["answers", "gold"],
        }
    }

    fn outputs(self, cfg: &RunConfig) -> Vec<&'static str> {
        match self {
            Stage::Annotate if cfg.annotate.direct => vec!["labels"],
            Stage::Annotate => vec!["labels", "captions"],
            Stage::Train => vec!["params"],
            Stage::Select => vec!["selections"],
            Stage::Answer => vec!["answers"],
            Stage::Eval => vec![],
        }
    }

    fn uses_gateway(self) -> bool {
        matches!(self, Stage::Annotate | Stage::Answer)
    }
}

fn err(field: impl Into<String>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        severity: Severity::Error,
        field: field.into(),
        message: message.into(),
    }
}

fn warn(field: impl Into<String>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        severity: Severity::Warning,
        field: field.into(),
        message: message.into(),
    }
}

/// Field-level checks that do not depend on the subcommand.
pub fn check_values(cfg: &RunConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let s = &cfg.strategy;
    if s.k == 0 {
        out.push(err("strategy.k", "must be at least 1"));
    }
    if !(s.threshold.is_finite() && s.threshold >= 0.0) {
        out.push(err("strategy.threshold", "must be finite and >= 0"));
    }
    if s.name != Strategy::Cdviews && s.threshold != StrategySettings::default().threshold {
        out.push(warn("strategy.threshold", format!("ignored by the {} strategy", s.name.as_str())));
    }
    if s.k > cfg.annotate.views_per_scene {
        out.push(warn(
            "strategy.k",
            format!(
                "k = {} exceeds annotate.views_per_scene = {}; selection fails with KTooLarge on scenes that small",
                s.k, cfg.annotate.views_per_scene
            ),
        ));
    }
    let g = &cfg.gateway;
    if g.parallelism == 0 {
        out.push(err("gateway.parallelism", "must be at least 1"));
    }
    if g.max_attempts == 0 {
        out.push(err("gateway.max_attempts", "must be at least 1"));
    }
    if g.model.trim().is_empty() {
        out.push(err("gateway.model", "must be non-empty"));
    }
    if g.image_limit == Some(0) {
        out.push(err("gateway.image_limit", "must be at least 1 when set"));
    }
    if let Some(limit) = g.image_limit {
        if s.k > limit {
            out.push(warn(
                "strategy.k",
                format!("k = {} exceeds gateway.image_limit = {limit}; answer requests will be rejected", s.k),
            ));
        }
    }
    if cfg.annotate.views_per_scene == 0 {
        out.push(err("annotate.views_per_scene", "must be at least 1"));
    }
    if let Err(e) = cfg.training.selector.validate() {
        out.push(err("training.selector", e));
    }
    if let Err(e) = cfg.training.train.validate() {
        out.push(err("training.train", e.to_string()));
    }
    if !(0.0..1.0).contains(&cfg.training.holdout_fraction) {
        out.push(err("training.holdout_fraction", "must lie in [0, 1)"));
    }
    out
}

fn check_gateway(cfg: &RunConfig, out: &mut Vec<Diagnostic>) {
    let g = &cfg.gateway;
    match g.backend {
        BackendKind::Mock => match &g.mock_script {
            None => out.push(err("gateway.mock_script", "required when gateway.backend is \"mock\"")),
            Some(p) if !p.is_file() => out.push(err("gateway.mock_script", format!("{} does not exist", p.display()))),
            Some(_) => {}
        },
        BackendKind::Http => {
            match g.base_url.as_deref() {
                None | Some("") => out.push(err("gateway.base_url", "required when gateway.backend is \"http\"")),
                Some(u) if !(u.starts_with("http://") || u.starts_with("https://")) => {
                    out.push(err("gateway.base_url", format!("{u:?} is not an http(s) URL")))
                }
                Some(_) => {}
            }
            if g.token_env.is_empty() {
                out.push(err("gateway.token_env", "must name an environment variable"));
            }
        }
    }
}

fn check_output(field: &str, path: &Path, out: &mut Vec<Diagnostic>) {
    if path.is_dir() {
        out.push(err(format!("paths.{field}"), format!("{} is a directory", path.display())));
    }
}

/// Every problem that would stop `stage` before it starts.
pub fn diagnose(cfg: &RunConfig, stage: Stage) -> Vec<Diagnostic> {
    let mut out = check_values(cfg);
    for field in stage.inputs(cfg) {
        match cfg.paths.lookup(field) {
            None => out.push(err(format!("paths.{field}"), "required")),
            Some(p) if !p.exists() => out.push(err(format!("paths.{field}"), format!("{} does not exist", p.display()))),
            Some(_) => {}
        }
    }
    for field in stage.outputs(cfg) {
        match cfg.paths.lookup(field) {
            None => out.push(err(format!("paths.{field}"), "required")),
            Some(p) => check_output(field, p, &mut out),
        }
    }
    if let Some(t) = &cfg.paths.templates {
        if !t.is_dir() {
            out.push(err("paths.templates", format!("{} is not a directory", t.display())));
        }
    }
    if stage.uses_gateway() {
        check_gateway(cfg, &mut out);
    }
    out
}

/// Diagnostics for `validate-config`: value checks plus every path that is
/// set but missing. Output paths are allowed not to exist yet.
pub fn diagnose_file(cfg: &RunConfig) -> Vec<Diagnostic> {
    let mut out = check_values(cfg);
    let outputs = ["labels", "captions", "params", "selections", "answers", "cache_dir"];
    let mut copy = cfg.paths.clone();
    for (field, p) in copy.fields_mut() {
        if let Some(p) = p.as_ref() {
            if outputs.contains(&field) {
                check_output(field, p, &mut out);
            } else if !p.exists() {
                out.push(err(format!("paths.{field}"), format!("{} does not exist", p.display())));
            }
        }
    }
    if cfg.gateway.mock_script.is_some() || cfg.gateway.backend == BackendKind::Http {
        check_gateway(cfg, &mut out);
    }
    out
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}
