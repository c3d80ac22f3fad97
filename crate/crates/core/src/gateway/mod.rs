//! The only path to a vision-language model. Requests are keyed by a
//! canonical serialization, answered from a content-addressed cache when
//! possible, and otherwise sent to a [`Backend`] with exponential backoff
//! under a requests-per-minute ceiling.

mod cache;
mod http;
mod mock;
mod request;

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use thiserror::Error;

pub use cache::{CacheEntry, ResponseCache};
pub use http::{HttpBackend, DEFAULT_TOKEN_ENV};
pub use mock::{FnBackend, Matcher, MockBackend, MockScript, ScriptRule, ScriptedReply};
pub use request::{ChatRequest, ChatResponse, ImageSource, Message, Part, Role, DEFAULT_MAX_TOKENS};

use crate::annotate::{PromptTemplate, TemplateRole};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("request has no messages")]
    EmptyRequest,
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("backend refused the request: {0}")]
    Fatal(String),
    #[error("no mock rule matches request ({0})")]
    UnscriptedRequest(String),
    #[error("{count} images exceed the backend limit of {limit}")]
    TooManyImages { count: usize, limit: usize },
    #[error("cannot read image {path}: {message}")]
    ImageUnreadable { path: PathBuf, message: String },
    #[error("response cache: {0}")]
    Cache(String),
    #[error("template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub finish_reason: String,
}

impl BackendReply {
    pub fn stop(text: impl Into<String>) -> Self {
        BackendReply {
            text: text.into(),
            finish_reason: "stop".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, rate limiting, server errors.
    #[error("transient: {0}")]
    Transient(String),
    #[error("fatal: {0}")]
    Fatal(String),
    #[error("unscripted: {0}")]
    Unscripted(String),
}

pub trait Backend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError>;

    /// Maximum images per request, if the backend declares one.
    fn image_limit(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, for `attempt >= 1`.
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt as i32 - 1))
    }
}

/// Sliding one-minute window over send times.
#[derive(Debug)]
struct RateLimiter {
    per_minute: Option<u32>,
    sent: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    fn acquire(&self) {
        let Some(limit) = self.per_minute.filter(|&l| l > 0) else { return };
        let window = Duration::from_secs(60);
        loop {
            let wait = {
                let mut sent = self.sent.lock().expect("limiter lock");
                let now = Instant::now();
                while sent.front().is_some_and(|t| now.duration_since(*t) >= window) {
                    sent.pop_front();
                }
                if sent.len() < limit as usize {
                    sent.push_back(now);
                    return;
                }
                window - now.duration_since(*sent.front().expect("non-empty"))
            };
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    /// Calls into the backend, retries included.
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

pub struct Gateway {
    backend: Option<Arc<dyn Backend>>,
    cache: ResponseCache,
    retry: RetryPolicy,
    limiter: RateLimiter,
    image_limit: Option<usize>,
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
    cache_misses: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Option<Arc<dyn Backend>>, cache: ResponseCache) -> Self {
        Gateway {
            backend,
            cache,
            retry: RetryPolicy::default(),
            limiter: RateLimiter {
                per_minute: None,
                sent: Mutex::new(VecDeque::new()),
            },
            image_limit: None,
            in_flight: Mutex::new(HashMap::new()),
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            cache_misses: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, per_minute: Option<u32>) -> Self {
        self.limiter.per_minute = per_minute;
        self
    }

    pub fn with_image_limit(mut self, limit: Option<usize>) -> Self {
        self.image_limit = limit;
        self
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            cache_misses: self.cache_misses.load(Ordering::SeqCst),
        }
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Tightest of the gateway and backend image limits.
    pub fn image_limit(&self) -> Option<usize> {
        let b = self.backend.as_ref().and_then(|b| b.image_limit());
        match (self.image_limit, b) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if request.messages.is_empty() {
            return Err(GatewayError::EmptyRequest);
        }
        if let Some(limit) = self.image_limit() {
            let count = request.image_count();
            if count > limit {
                return Err(GatewayError::TooManyImages { count, limit });
            }
        }
        let key = request.cache_key()?;
        let slot = {
            let mut map = self.in_flight.lock().expect("in-flight lock");
            map.entry(key.clone()).or_default().clone()
        };
        // Concurrent identical requests wait here and then hit the cache.
        let _guard = slot.lock().expect("key lock");

        if let Some(entry) = self.cache.get(&key)? {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            let mut r = entry.response;
            r.served_from_cache = true;
            return Ok(r);
        }
        self.cache_misses.fetch_add(1, Ordering::SeqCst);
        let backend = self
            .backend
            .as_ref()
            .ok_or_else(|| GatewayError::Config("no backend configured and the response is not cached".into()))?;

        let mut attempt = 0;
        let reply = loop {
            attempt += 1;
            self.limiter.acquire();
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            let started = Instant::now();
            match backend.send(request) {
                Ok(reply) => break (reply, started.elapsed()),
                Err(BackendError::Transient(msg)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::Exhausted {
                            attempts: attempt,
                            last: msg,
                        });
                    }
                    log::debug!("attempt {attempt} failed ({msg}); retrying");
                    std::thread::sleep(self.retry.delay(attempt));
                }
                Err(BackendError::Fatal(msg)) => return Err(GatewayError::Fatal(msg)),
                Err(BackendError::Unscripted(msg)) => return Err(GatewayError::UnscriptedRequest(msg)),
            }
        };
        let (reply, elapsed) = reply;
        let response = ChatResponse {
            text: reply.text,
            finish_reason: reply.finish_reason,
            latency_ms: elapsed.as_millis() as u64,
            served_from_cache: false,
        };
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        self.cache.put(CacheEntry {
            key,
            model: request.model.clone(),
            created_at,
            response: response.clone(),
        })?;
        Ok(response)
    }
}

/// One multimodal request: all images in the given order, then the
/// rendered question. Returns the reply text verbatim.
pub fn answer_question(
    gateway: &Gateway,
    model: &str,
    images: &[PathBuf],
    question: &str,
    template: &PromptTemplate,
) -> Result<String, GatewayError> {
    if images.is_empty() {
        return Err(GatewayError::Config("answering needs at least one view".into()));
    }
    if template.role != TemplateRole::Answer {
        return Err(GatewayError::Template(format!("expected an answer template, got {:?}", template.role)));
    }
    let text = template
        .render(&[("question", question)])
        .map_err(|e| GatewayError::Template(e.to_string()))?;
    let mut parts: Vec<Part> = images.iter().map(Part::image_path).collect();
    parts.push(Part::text(text));
    let mut req = ChatRequest::new(model, "answer");
    if let Some(sys) = &template.system {
        req = req.system(sys.clone());
    }
    req = req.user(parts);
    Ok(gateway.complete(&req)?.text)
}
