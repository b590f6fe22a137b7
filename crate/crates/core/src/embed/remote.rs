//! Embedding service reached over HTTP.
//!
//! Wire format: `POST {endpoint}` with body `{"model": ..., "text": ...}`,
//! answered by `{"embedding": [f64, ...]}`. The vector is normalized on
//! receipt.

use std::sync::Arc;

use serde::Deserialize;

use super::{BackendDescriptor, BackendKind, EmbedError, EmbeddingBackend, EmbeddingVector};
use crate::http::{HttpRequest, Transport};

pub struct RemoteEmbeddingBackend {
    descriptor: BackendDescriptor,
    endpoint: String,
    model: String,
    transport: Arc<dyn Transport>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    embedding: Vec<f64>,
}

impl RemoteEmbeddingBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dim: usize, transport: Arc<dyn Transport>) -> Self {
        let model = model.into();
        Self {
            descriptor: BackendDescriptor {
                backend_id: format!("remote-{model}"),
                dim,
                kind: BackendKind::RemoteService,
                concurrent: true,
            },
            endpoint: endpoint.into(),
            model,
            transport,
        }
    }
}

impl EmbeddingBackend for RemoteEmbeddingBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let body = serde_json::json!({ "model": self.model, "text": text });
        let req = HttpRequest {
            url: self.endpoint.clone(),
            headers: vec![("Content-Type".into(), "application/json".into())],
            body: serde_json::to_vec(&body).expect("json body"),
        };
        let resp = self
            .transport
            .post(&req)
            .map_err(|e| EmbedError::BackendUnavailable(e.to_string()))?;
        if resp.status != 200 {
            return Err(EmbedError::BackendUnavailable(format!("status {}", resp.status)));
        }
        let parsed: EmbeddingResponse =
            serde_json::from_slice(&resp.body).map_err(|e| EmbedError::BackendUnavailable(e.to_string()))?;
        if parsed.embedding.len() != self.descriptor.dim {
            return Err(EmbedError::DimensionMismatch {
                left: parsed.embedding.len(),
                right: self.descriptor.dim,
            });
        }
        EmbeddingVector::normalize(parsed.embedding).ok_or_else(|| EmbedError::DegenerateEmbedding(text.to_string()))
    }
}
