//! Provider wire adapters.

use std::collections::HashMap;
use std::sync::Arc;

use base64::Engine;
use serde_json::{json, Value};

use super::LmmRequest;
use crate::http::{HttpRequest, HttpResponse};

/// Why a single provider call failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderFailure {
    /// Worth retrying: throttling, server errors, timeouts, garbled replies.
    Transient(String),
    Authentication(String),
    Malformed(String),
    Refusal(String),
}

/// Maps an HTTP status to a failure class; `None` for success.
pub fn classify_status(status: u16, body: &[u8]) -> Option<ProviderFailure> {
    let detail = || format!("HTTP {status}: {}", String::from_utf8_lossy(&body[..body.len().min(200)]));
    match status {
        200..=299 => None,
        401 | 403 => Some(ProviderFailure::Authentication(detail())),
        408 | 429 | 500..=599 => Some(ProviderFailure::Transient(detail())),
        _ => Some(ProviderFailure::Malformed(detail())),
    }
}

pub trait WireAdapter: Send + Sync {
    /// Registry key, e.g. `gemini`.
    fn kind(&self) -> &str;

    fn build_request(&self, endpoint: &str, api_key: &str, request: &LmmRequest, image: Option<&[u8]>) -> HttpRequest;

    /// Extracts the answer text, or classifies the failure.
    fn parse_response(&self, response: &HttpResponse) -> Result<String, ProviderFailure>;
}

/// Gemini-style `generateContent`: model id in the path, API key in the
/// `x-goog-api-key` header, parts = `[text, inline image]`.
#[derive(Debug, Default, Clone)]
pub struct GeminiAdapter;

const REFUSAL_FINISH_REASONS: &[&str] = &["SAFETY", "PROHIBITED_CONTENT", "BLOCKLIST", "SPII", "RECITATION", "IMAGE_SAFETY"];

impl WireAdapter for GeminiAdapter {
    fn kind(&self) -> &str {
        "gemini"
    }

    fn build_request(&self, endpoint: &str, api_key: &str, request: &LmmRequest, image: Option<&[u8]>) -> HttpRequest {
        let mut parts = vec![json!({ "text": request.prompt_text })];
        if let (Some(bytes), Some(att)) = (image, request.image.as_ref()) {
            parts.push(json!({
                "inline_data": {
                    "mime_type": att.mime_type(),
                    "data": base64::engine::general_purpose::STANDARD.encode(bytes),
                }
            }));
        }
        let body = json!({
            "contents": [{ "role": "user", "parts": parts }],
            "generationConfig": {
                "temperature": request.params.temperature,
                "maxOutputTokens": request.params.max_output_tokens,
            },
        });
        HttpRequest {
            url: format!(
                "{}/models/{}:generateContent",
                endpoint.trim_end_matches('/'),
                request.model_id
            ),
            headers: vec![
                ("Content-Type".into(), "application/json".into()),
                ("x-goog-api-key".into(), api_key.into()),
            ],
            body: serde_json::to_vec(&body).expect("json body"),
        }
    }

    fn parse_response(&self, response: &HttpResponse) -> Result<String, ProviderFailure> {
        if let Some(f) = classify_status(response.status, &response.body) {
            return Err(f);
        }
        let v: Value = serde_json::from_slice(&response.body)
            .map_err(|e| ProviderFailure::Transient(format!("unparseable response: {e}")))?;
        if let Some(reason) = v.pointer("/promptFeedback/blockReason").and_then(Value::as_str) {
            return Err(ProviderFailure::Refusal(format!("prompt blocked: {reason}")));
        }
        let candidate = v.pointer("/candidates/0");
        let text: String = candidate
            .and_then(|c| c.pointer("/content/parts"))
            .and_then(Value::as_array)
            .map(|parts| parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect())
            .unwrap_or_default();
        let finish = candidate
            .and_then(|c| c.get("finishReason"))
            .and_then(Value::as_str)
            .unwrap_or("");
        if text.is_empty() {
            if REFUSAL_FINISH_REASONS.contains(&finish) {
                return Err(ProviderFailure::Refusal(format!("finishReason {finish}")));
            }
            if candidate.is_none() {
                return Err(ProviderFailure::Refusal("no candidates returned".into()));
            }
            return Err(ProviderFailure::Refusal(format!("empty answer (finishReason {finish:?})")));
        }
        Ok(text)
    }
}

/// Adapters by kind string. Starts with the built-in `gemini` adapter.
#[derive(Clone)]
pub struct AdapterRegistry {
    adapters: HashMap<String, Arc<dyn WireAdapter>>,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        let mut r = Self { adapters: HashMap::new() };
        r.register(Arc::new(GeminiAdapter));
        r
    }
}

impl AdapterRegistry {
    pub fn register(&mut self, adapter: Arc<dyn WireAdapter>) {
        self.adapters.insert(adapter.kind().to_string(), adapter);
    }

    pub fn get(&self, kind: &str) -> Option<Arc<dyn WireAdapter>> {
        self.adapters.get(kind).cloned()
    }

    pub fn kinds(&self) -> Vec<&str> {
        let mut k: Vec<&str> = self.adapters.keys().map(String::as_str).collect();
        k.sort_unstable();
        k
    }
}
