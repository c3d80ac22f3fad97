use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendReply, ChatRequest, GatewayError};

/// Conditions a request must meet for a rule to fire. Absent conditions
/// always hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    /// Every string must occur in the request text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// At least one image path must end with one of these suffixes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_any: Vec<String>,
}

impl Matcher {
    pub fn matches(&self, request: &ChatRequest) -> bool {
        if let Some(tag) = &self.tag {
            if &request.tag != tag {
                return false;
            }
        }
        if !self.contains.is_empty() {
            let text = request.text();
            if !self.contains.iter().all(|c| text.contains(c.as_str())) {
                return false;
            }
        }
        if !self.image_any.is_empty() {
            let paths = request.image_paths();
            let hit = paths.iter().any(|p| {
                let s = p.to_string_lossy();
                self.image_any.iter().any(|suffix| s.ends_with(suffix.as_str()))
            });
            if !hit {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Plain(String),
    Text { text: String },
    Echo { echo: bool },
    Transient { transient: String },
    Fatal { fatal: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub when: Matcher,
    /// Replies served in order; the last one repeats once exhausted.
    pub replies: Vec<ScriptedReply>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_limit: Option<usize>,
    pub rules: Vec<ScriptRule>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let bytes = std::fs::read(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let script: MockScript =
            serde_json::from_slice(&bytes).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        for (i, r) in self.rules.iter().enumerate() {
            if r.replies.is_empty() {
                return Err(GatewayError::Config(format!("mock rule {i} has no replies")));
            }
        }
        Ok(())
    }
}

/// Deterministic scripted backend. The first rule whose matcher accepts a
/// request answers it; every request is recorded.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    served: Mutex<Vec<usize>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let n = script.rules.len();
        MockBackend {
            script,
            served: Mutex::new(vec![0; n]),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("mock log").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("mock log").len()
    }

    pub fn calls_with_tag(&self, tag: &str) -> usize {
        self.log.lock().expect("mock log").iter().filter(|r| r.tag == tag).count()
    }
}

impl Backend for MockBackend {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        self.log.lock().expect("mock log").push(request.clone());
        let Some(idx) = self.script.rules.iter().position(|r| r.when.matches(request)) else {
            let mut preview = request.text();
            preview.truncate(120);
            return Err(BackendError::Unscripted(format!("tag `{}`: {preview}", request.tag)));
        };
        let rule = &self.script.rules[idx];
        let n = {
            let mut served = self.served.lock().expect("mock counters");
            let n = served[idx];
            served[idx] += 1;
            n
        };
        let reply = &rule.replies[n.min(rule.replies.len() - 1)];
        match reply {
            ScriptedReply::Plain(text) | ScriptedReply::Text { text } => Ok(BackendReply::stop(text.clone())),
            ScriptedReply::Echo { .. } => Ok(BackendReply::stop(request.text())),
            ScriptedReply::Transient { transient } => Err(BackendError::Transient(transient.clone())),
            ScriptedReply::Fatal { fatal } => Err(BackendError::Fatal(fatal.clone())),
        }
    }

    fn image_limit(&self) -> Option<usize> {
        self.script.image_limit
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<BackendReply, BackendError> + Send + Sync;

/// Backend driven by a closure; handy for oracle-style mocks in tests.
pub struct FnBackend {
    f: Box<ReplyFn>,
    image_limit: Option<usize>,
    calls: std::sync::atomic::AtomicUsize,
}

impl FnBackend {
    pub fn new(f: impl Fn(&ChatRequest) -> Result<BackendReply, BackendError> + Send + Sync + 'static) -> Self {
        FnBackend {
            f: Box::new(f),
            image_limit: None,
            calls: Default::default(),
        }
    }

    pub fn with_image_limit(mut self, limit: usize) -> Self {
        self.image_limit = Some(limit);
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl Backend for FnBackend {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        (self.f)(request)
    }

    fn image_limit(&self) -> Option<usize> {
        self.image_limit
    }
}
