use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_digest, Digest};
use crate::types::{BackendRef, MediaType, VisualContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartKind {
    Text,
    Image,
}

/// One typed piece of message content. Image parts are identified by the
/// digest of their bytes; the local path is only used to load the bytes and
/// is not part of the request identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentPart {
    pub kind: PartKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_type: Option<MediaType>,
    #[serde(skip)]
    pub image_path: Option<PathBuf>,
}

impl ContentPart {
    pub fn text(text: impl Into<String>) -> Self {
        Self { kind: PartKind::Text, text: Some(text.into()), image_sha256: None, media_type: None, image_path: None }
    }

    pub fn image(visual: &VisualContext) -> Self {
        Self {
            kind: PartKind::Image,
            text: None,
            image_sha256: Some(visual.sha256.clone()),
            media_type: Some(visual.media_type),
            image_path: Some(visual.image_path.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub backend_id: String,
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

/// Decoding parameters shared by every request of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoding {
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self { temperature: 0.0, seed: 42, max_tokens: 1024 }
    }
}

impl ModelRequest {
    /// A single user message: text followed by an optional image.
    pub fn user(target: &BackendRef, text: impl Into<String>, image: Option<&VisualContext>, decoding: Decoding) -> Self {
        let mut parts = vec![ContentPart::text(text)];
        parts.extend(image.map(ContentPart::image));
        Self {
            backend_id: target.id.clone(),
            model: target.model.clone(),
            messages: vec![Message { role: Role::User, parts }],
            temperature: decoding.temperature,
            seed: decoding.seed,
            max_tokens: decoding.max_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.messages.is_empty() {
            return Err("request has no messages".into());
        }
        if !(self.temperature >= 0.0) {
            return Err("temperature must be non-negative".into());
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        for part in self.messages.iter().flat_map(|m| &m.parts) {
            match part.kind {
                PartKind::Text if part.text.is_none() => return Err("text part without text".into()),
                PartKind::Image if part.image_sha256.is_none() || part.media_type.is_none() => {
                    return Err("image part without digest or media type".into())
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// All text parts concatenated with newlines.
    pub fn joined_text(&self) -> String {
        self.messages
            .iter()
            .flat_map(|m| &m.parts)
            .filter_map(|p| p.text.as_deref())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn has_image(&self) -> bool {
        self.messages.iter().flat_map(|m| &m.parts).any(|p| p.kind == PartKind::Image)
    }
}

/// Content address of a request: SHA-256 over its canonical serialization
/// (every field, images by digest).
pub fn cache_key(request: &ModelRequest) -> Digest {
    canonical_digest(request).expect("ModelRequest serializes")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub usage: Usage,
    pub cached: bool,
    pub latency_ms: u64,
    /// Attempts the retry layer needed; 1 when the first try succeeded.
    pub attempts: u32,
}

impl ModelResponse {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into(), usage: Usage::default(), cached: false, latency_ms: 0, attempts: 1 }
    }
}
