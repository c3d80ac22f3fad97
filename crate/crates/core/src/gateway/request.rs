use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageSource {
    Path { path: PathBuf },
    Base64 { media_type: String, data: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image { source: ImageSource },
}

impl Part {
    pub fn text(t: impl Into<String>) -> Self {
        Part::Text { text: t.into() }
    }

    pub fn image_path(p: impl Into<PathBuf>) -> Self {
        Part::Image {
            source: ImageSource::Path { path: p.into() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Purpose label such as `caption`, `match` or `answer`. Part of the
    /// cache key and visible to mock matchers.
    pub tag: String,
}

pub const DEFAULT_MAX_TOKENS: u32 = 256;

impl ChatRequest {
    pub fn new(model: impl Into<String>, tag: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            messages: Vec::new(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            tag: tag.into(),
        }
    }

    pub fn system(mut self, text: impl Into<String>) -> Self {
        self.messages.push(Message {
            role: Role::System,
            parts: vec![Part::text(text)],
        });
        self
    }

    pub fn user(mut self, parts: Vec<Part>) -> Self {
        self.messages.push(Message { role: Role::User, parts });
        self
    }

    pub fn image_count(&self) -> usize {
        self.parts().filter(|p| matches!(p, Part::Image { .. })).count()
    }

    pub fn parts(&self) -> impl Iterator<Item = &Part> {
        self.messages.iter().flat_map(|m| m.parts.iter())
    }

    /// All text parts joined by newlines.
    pub fn text(&self) -> String {
        self.parts()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn image_paths(&self) -> Vec<&Path> {
        self.parts()
            .filter_map(|p| match p {
                Part::Image {
                    source: ImageSource::Path { path },
                } => Some(path.as_path()),
                _ => None,
            })
            .collect()
    }

    /// Compact JSON with sorted keys in which every image is replaced by
    /// the SHA-256 of its bytes, so the same pixels under another path give
    /// the same key and different pixels under one path do not.
    pub fn canonical_json(&self) -> Result<String, GatewayError> {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let parts = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text { text } => Ok(json!({"type": "text", "text": text})),
                        Part::Image { source } => {
                            let bytes = image_bytes(source)?;
                            Ok(json!({"type": "image", "sha256": crate::fsutil::sha256_hex(&bytes)}))
                        }
                    })
                    .collect::<Result<Vec<_>, GatewayError>>()?;
                Ok(json!({"role": m.role, "parts": parts}))
            })
            .collect::<Result<_, GatewayError>>()?;
        // serde_json's default map is ordered, so keys serialize sorted.
        let v = json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "tag": self.tag,
        });
        Ok(serde_json::to_string(&v).expect("json value serializes"))
    }

    pub fn cache_key(&self) -> Result<String, GatewayError> {
        let canonical = self.canonical_json()?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}

pub(crate) fn image_bytes(source: &ImageSource) -> Result<Vec<u8>, GatewayError> {
    match source {
        ImageSource::Path { path } => std::fs::read(path).map_err(|e| GatewayError::ImageUnreadable {
            path: path.clone(),
            message: e.to_string(),
        }),
        ImageSource::Base64 { data, .. } => base64::engine::general_purpose::STANDARD
            .decode(data)
            .map_err(|e| GatewayError::ImageUnreadable {
                path: PathBuf::from("<base64>"),
                message: e.to_string(),
            }),
    }
}

pub(crate) fn media_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("ppm") => "image/x-portable-pixmap",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: String,
    pub latency_ms: u64,
    #[serde(default)]
    pub served_from_cache: bool,
}
