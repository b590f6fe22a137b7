//! Text embedding backends and similarity-argmax label matching.
//!
//! Every vector leaving a backend is L2-normalized, so the dot product of two
//! [`EmbeddingVector`]s is their cosine similarity. Label matching scores the
//! answer text against every (templated) class label and picks the maximum,
//! breaking ties toward the smallest label index.

mod bpe;
mod golden;
#[cfg(feature = "onnx")]
mod onnx;
mod reference;
mod remote;

use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::labels::{apply_template, ClassLabel, ClassLabelSet, LabelError, PromptTemplate};

pub use bpe::{BpeError, ClipTokenizer, Encoded, CLIP_CONTEXT_WINDOW};
pub use golden::{read_golden, write_golden, GoldenError, GoldenFixture};
#[cfg(feature = "onnx")]
pub use onnx::{OnnxTextEncoder, OnnxTextEncoderOptions};
pub use reference::{fnv1a_64, reference_hash_embed, ReferenceHashBackend, DEFAULT_REFERENCE_DIM};
pub use remote::RemoteEmbeddingBackend;

/// Unit-norm tolerance applied at the backend boundary.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding dimension must be at least {min}, got {dim}")]
    DimensionTooSmall { dim: usize, min: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("accumulator is all zeros for {0:?}")]
    DegenerateEmbedding(String),
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("model file backend: {0}")]
    Model(String),
    #[error(transparent)]
    Tokenizer(#[from] BpeError),
    #[error(transparent)]
    Label(#[from] LabelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    ReferenceHash,
    ModelFile,
    RemoteService,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::ReferenceHash => "reference-hash",
            BackendKind::ModelFile => "model-file",
            BackendKind::RemoteService => "remote-service",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub dim: usize,
    pub kind: BackendKind,
    /// Whether `embed_text` may be called from several threads at once.
    pub concurrent: bool,
}

/// A unit-norm embedding. The only ways to build one normalize or check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Scales `values` to unit L2 norm.
    pub fn normalize(values: Vec<f64>) -> Option<Self> {
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    /// Accepts values already at unit norm (within [`UNIT_NORM_TOLERANCE`]).
    pub fn from_unit(values: Vec<f64>) -> Option<Self> {
        ((l2_norm(&values) - 1.0).abs() < UNIT_NORM_TOLERANCE).then_some(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A text encoder producing unit-norm vectors of a fixed dimension.
pub trait EmbeddingBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    fn dim(&self) -> usize {
        self.descriptor().dim
    }
}

/// Funnels every call through one lock, for backends that are not safe to
/// call concurrently.
pub struct Serialized<B> {
    inner: Mutex<B>,
    descriptor: BackendDescriptor,
}

impl<B: EmbeddingBackend> Serialized<B> {
    pub fn new(inner: B) -> Self {
        let descriptor = inner.descriptor().clone();
        Self {
            inner: Mutex::new(inner),
            descriptor,
        }
    }
}

impl<B: EmbeddingBackend> EmbeddingBackend for Serialized<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let guard = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        guard.embed_text(text)
    }
}

/// Wraps `backend` so the pipeline can share it: backends that declare
/// concurrent safety pass through, others go behind [`Serialized`].
pub fn share_backend<B: EmbeddingBackend + 'static>(backend: B) -> Arc<dyn EmbeddingBackend> {
    if backend.descriptor().concurrent {
        Arc::new(backend)
    } else {
        Arc::new(Serialized::new(backend))
    }
}

/// Embeds `text` with the backend's pre-check for empty input and a
/// post-check of the unit-norm and dimension contract.
pub fn embed_text(backend: &dyn EmbeddingBackend, text: &str) -> Result<EmbeddingVector, EmbedError> {
    if crate::labels::canonicalize(text).is_err() {
        return Err(EmbedError::EmptyText);
    }
    let v = backend.embed_text(text)?;
    if v.dim() != backend.dim() {
        return Err(EmbedError::DimensionMismatch {
            left: v.dim(),
            right: backend.dim(),
        });
    }
    debug_assert!((v.norm() - 1.0).abs() < UNIT_NORM_TOLERANCE);
    Ok(v)
}

/// Dot product of two unit vectors.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
}

/// Index of the largest score; ties go to the smallest index. NaNs never win.
pub fn select_winner(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// The chosen class with its full score vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub predicted_label: ClassLabel,
    pub score: f64,
    /// Indexed by label index.
    pub scores: Vec<f64>,
    /// Answer texts that fed the match, in stage order.
    pub stage_trace: Vec<String>,
}

/// Label embeddings computed once and reused across many answers.
pub struct LabelIndex {
    labels: ClassLabelSet,
    vectors: Vec<EmbeddingVector>,
}

impl LabelIndex {
    pub fn build(
        labels: &ClassLabelSet,
        backend: &dyn EmbeddingBackend,
        template: &PromptTemplate,
    ) -> Result<Self, EmbedError> {
        let vectors = labels
            .labels()
            .iter()
            .map(|l| embed_text(backend, &apply_template(template, l)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            labels: labels.clone(),
            vectors,
        })
    }

    pub fn labels(&self) -> &ClassLabelSet {
        &self.labels
    }

    pub fn label_vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn scores(&self, answer: &EmbeddingVector) -> Result<Vec<f64>, EmbedError> {
        self.vectors.iter().map(|v| cosine(answer, v)).collect()
    }

    pub fn classify(&self, z_text: &str, backend: &dyn EmbeddingBackend) -> Result<Prediction, EmbedError> {
        let z = embed_text(backend, z_text)?;
        let scores = self.scores(&z)?;
        Ok(self.prediction_from_scores(scores, vec![z_text.to_string()]))
    }

    /// Winner selection over an externally supplied score vector.
    pub(crate) fn prediction_from_scores(&self, scores: Vec<f64>, stage_trace: Vec<String>) -> Prediction {
        // Cosines of finite unit vectors are never NaN, and a set has >= 2 labels.
        let winner = select_winner(&scores).expect("label set is non-empty and scores are finite");
        Prediction {
            predicted_label: self.labels.labels()[winner].clone(),
            score: scores[winner],
            scores,
            stage_trace,
        }
    }
}

/// Picks the label whose embedding is most similar to the embedding of `z_text`.
pub fn classify_by_similarity(
    z_text: &str,
    labels: &ClassLabelSet,
    backend: &dyn EmbeddingBackend,
    template: &PromptTemplate,
) -> Result<Prediction, EmbedError> {
    LabelIndex::build(labels, backend, template)?.classify(z_text, backend)
}
