use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::request::{image_bytes, media_type};
use super::{Backend, BackendError, BackendReply, ChatRequest, GatewayError, ImageSource, Part};

pub const DEFAULT_TOKEN_ENV: &str = "VIEWSEL_API_KEY";

/// Chat-completions client: `POST {base_url}/chat/completions` with
/// bearer auth, images inlined as data URLs.
pub struct HttpBackend {
    base_url: String,
    token: Option<String>,
    image_limit: Option<usize>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// Reads the bearer token from `token_env` if that variable is set.
    pub fn new(
        base_url: impl Into<String>,
        token_env: &str,
        image_limit: Option<usize>,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            token: std::env::var(token_env).ok().filter(|t| !t.is_empty()),
            image_limit,
            client,
        })
    }

    fn body(request: &ChatRequest) -> Result<Value, BackendError> {
        let mut messages = Vec::new();
        for m in &request.messages {
            let mut content = Vec::new();
            for p in &m.parts {
                match p {
                    Part::Text { text } => content.push(json!({"type": "text", "text": text})),
                    Part::Image { source } => {
                        let url = match source {
                            ImageSource::Base64 { media_type, data } => format!("data:{media_type};base64,{data}"),
                            ImageSource::Path { path } => {
                                let bytes = image_bytes(source).map_err(|e| BackendError::Fatal(e.to_string()))?;
                                format!(
                                    "data:{};base64,{}",
                                    media_type(path),
                                    base64::engine::general_purpose::STANDARD.encode(bytes)
                                )
                            }
                        };
                        content.push(json!({"type": "image_url", "image_url": {"url": url}}));
                    }
                }
            }
            messages.push(json!({"role": m.role, "content": content}));
        }
        Ok(json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }))
    }
}

impl Backend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let body = Self::body(request)?;
        let mut call = self.client.post(format!("{}/chat/completions", self.base_url)).json(&body);
        if let Some(token) = &self.token {
            call = call.bearer_auth(token);
        }
        let resp = call.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Fatal(format!("HTTP {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| BackendError::Fatal(format!("bad JSON: {e}")))?;
        let choice = &v["choices"][0];
        let content = match &choice["message"]["content"] {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join(""),
            _ => return Err(BackendError::Fatal("response has no message content".into())),
        };
        Ok(BackendReply {
            text: content,
            finish_reason: choice["finish_reason"].as_str().unwrap_or("stop").to_string(),
        })
    }

    fn image_limit(&self) -> Option<usize> {
        self.image_limit
    }
}
