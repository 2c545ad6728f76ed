//! Chat-completions wire client.

use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::{json, Value};

use super::{Backend, BackendError, ModelRequest, ModelResponse, PartKind, Usage};
use crate::types::VisualContext;

#[derive(Debug, Clone)]
pub struct WireConfig {
    /// Service root, without the `/v1/chat/completions` suffix.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl WireConfig {
    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// POSTs requests to `{base_url}/v1/chat/completions` and reads
/// `choices[0].message.content`. Does not retry by itself; wrap it in
/// [`super::Retrying`].
pub struct ChatCompletionsBackend {
    id: String,
    config: WireConfig,
    agent: ureq::Agent,
}

impl ChatCompletionsBackend {
    pub fn new(id: impl Into<String>, config: WireConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { id: id.into(), config, agent }
    }

    /// Wire body for a request; images are inlined as base64 data URLs.
    pub fn body(request: &ModelRequest) -> Result<Value, BackendError> {
        let mut messages = Vec::with_capacity(request.messages.len());
        for m in &request.messages {
            let mut content = Vec::with_capacity(m.parts.len());
            for part in &m.parts {
                match part.kind {
                    PartKind::Text => content.push(json!({"type": "text", "text": part.text.as_deref().unwrap_or_default()})),
                    PartKind::Image => {
                        let (Some(path), Some(sha), Some(media)) = (&part.image_path, &part.image_sha256, part.media_type) else {
                            return Err(BackendError::InvalidRequest("image part lacks a local path".into()));
                        };
                        let visual = VisualContext { image_path: path.clone(), media_type: media, sha256: sha.clone() };
                        let bytes = visual.read_verified().map_err(|e| BackendError::Io(e.to_string()))?;
                        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
                        content.push(json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{};base64,{b64}", media.mime())}
                        }));
                    }
                }
            }
            messages.push(json!({"role": m.role.as_str(), "content": content}));
        }
        Ok(json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "seed": request.seed,
            "max_tokens": request.max_tokens,
        }))
    }

    /// Extracts first-choice text and usage from a response document.
    pub fn parse_response(doc: &Value) -> Result<(String, Usage), BackendError> {
        let content = doc
            .pointer("/choices/0/message/content")
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join(""),
            Value::Null => return Err(BackendError::Malformed("choices[0].message.content is null".into())),
            other => return Err(BackendError::Malformed(format!("unexpected content {other}"))),
        };
        if text.trim().is_empty() {
            return Err(BackendError::EmptyResponse);
        }
        let usage = Usage {
            prompt_tokens: doc.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: doc.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        };
        Ok((text, usage))
    }
}

fn classify_status(status: u16, body: String) -> BackendError {
    match status {
        401 | 403 => BackendError::Auth(format!("HTTP {status}: {body}")),
        429 | 500..=599 => BackendError::Transient(format!("HTTP {status}: {body}")),
        _ => BackendError::Http { status, body },
    }
}

impl Backend for ChatCompletionsBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        request.validate().map_err(BackendError::InvalidRequest)?;
        let key = self
            .config
            .api_key
            .as_deref()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| BackendError::Auth("no API key configured (O1LOOM_API_KEY)".into()))?;
        let body = Self::body(request)?;
        let started = Instant::now();
        let result = self
            .agent
            .post(&self.config.endpoint())
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body);
        let mut resp = match result {
            Ok(r) => r,
            Err(e @ (ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed)) => {
                return Err(BackendError::Transient(e.to_string()))
            }
            Err(e) => return Err(BackendError::InvalidRequest(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, text));
        }
        let doc: Value = serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let (text, usage) = Self::parse_response(&doc)?;
        Ok(ModelResponse {
            text,
            usage,
            cached: false,
            latency_ms: started.elapsed().as_millis() as u64,
            attempts: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Decoding, ModelRequest};
    use crate::types::BackendRef;

    #[test]
    fn status_classification() {
        assert!(classify_status(429, String::new()).is_transient());
        assert!(classify_status(503, String::new()).is_transient());
        assert!(matches!(classify_status(401, String::new()), BackendError::Auth(_)));
        assert!(matches!(classify_status(404, String::new()), BackendError::Http { status: 404, .. }));
    }

    #[test]
    fn response_parsing() {
        let doc = json!({"choices": [{"message": {"content": "hi"}}], "usage": {"prompt_tokens": 3, "completion_tokens": 1}});
        let (text, usage) = ChatCompletionsBackend::parse_response(&doc).unwrap();
        assert_eq!(text, "hi");
        assert_eq!(usage, Usage { prompt_tokens: 3, completion_tokens: 1 });
        assert!(matches!(ChatCompletionsBackend::parse_response(&json!({"choices": []})), Err(BackendError::Malformed(_))));
        let empty = json!({"choices": [{"message": {"content": ""}}]});
        assert_eq!(ChatCompletionsBackend::parse_response(&empty).unwrap_err(), BackendError::EmptyResponse);
    }

    #[test]
    fn body_shape() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.png");
        let mut png = vec![0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
        png.extend_from_slice(b"xx");
        std::fs::write(&img, &png).unwrap();
        let v = VisualContext::load(&img).unwrap();
        let r = ModelRequest::user(&BackendRef::new("w", "gpt"), "q", Some(&v), Decoding::default());
        let body = ChatCompletionsBackend::body(&r).unwrap();
        assert_eq!(body["model"], "gpt");
        assert_eq!(body["seed"], 42);
        assert_eq!(body["messages"][0]["content"][0]["type"], "text");
        let url = body["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
    }

    #[test]
    fn missing_key_is_auth_error() {
        let b = ChatCompletionsBackend::new(
            "w",
            WireConfig { base_url: "http://127.0.0.1:9".into(), api_key: None, timeout: Duration::from_secs(1) },
        );
        let r = ModelRequest::user(&BackendRef::new("w", "m"), "q", None, Decoding::default());
        assert!(matches!(b.complete(&r), Err(BackendError::Auth(_))));
    }
}
