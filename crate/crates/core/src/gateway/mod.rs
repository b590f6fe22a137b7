//! Provider-agnostic access to large multimodal models.
//!
//! Requests are content-addressed: the [`cache_key`] of a request covers the
//! model id, the prompt, the image digest and the generation parameters, and
//! is the key for both the on-disk [`CacheStore`] and replay fixtures.

mod adapter;
mod cache;
mod key;
mod live;
mod ratelimit;
mod record;
mod replay;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adapter::{classify_status, AdapterRegistry, GeminiAdapter, ProviderFailure, WireAdapter};
pub use cache::{CacheStats, CacheStore};
pub use key::cache_key;
pub use live::{backoff_delay, LiveProvider};
pub use ratelimit::TokenBucket;
pub use record::{
    read_fixture_file, record_fixtures, write_fixture_file, FailedRequest, FixtureFile, FixtureRecord, PriorRecord,
    RecordSummary, RecordedRequest, FIXTURE_FORMAT, FIXTURE_VERSION,
};
pub use replay::ReplayProvider;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 256,
        }
    }
}

/// SHA-256 of image bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageDigest(pub [u8; 32]);

impl ImageDigest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for ImageDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageDigest({})", self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub path: PathBuf,
    pub digest: ImageDigest,
}

impl ImageAttachment {
    pub fn from_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            digest: ImageDigest::of_bytes(&bytes),
        })
    }

    /// Re-reads the file and checks it still hashes to the recorded digest.
    pub fn read_verified(&self) -> Result<Vec<u8>, GatewayError> {
        let bytes = fs::read(&self.path).map_err(|e| GatewayError::Image {
            path: self.path.clone(),
            message: e.to_string(),
        })?;
        if ImageDigest::of_bytes(&bytes) != self.digest {
            return Err(GatewayError::Image {
                path: self.path.clone(),
                message: "file changed since the request was built".into(),
            });
        }
        Ok(bytes)
    }

    pub fn mime_type(&self) -> &'static str {
        mime_for_path(&self.path)
    }
}

pub fn mime_for_path(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("heic") => "image/heic",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

/// One prompt (with optional image) for one model.
///
/// The image digest travels with the path, so "digest present iff image
/// present" holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmRequest {
    pub model_id: String,
    pub prompt_text: String,
    pub image: Option<ImageAttachment>,
    pub params: GenerationParams,
}

impl LmmRequest {
    pub fn text_only(model_id: impl Into<String>, prompt_text: impl Into<String>, params: GenerationParams) -> Self {
        Self {
            model_id: model_id.into(),
            prompt_text: prompt_text.into(),
            image: None,
            params,
        }
    }

    pub fn with_image(
        model_id: impl Into<String>,
        prompt_text: impl Into<String>,
        image_path: impl AsRef<Path>,
        params: GenerationParams,
    ) -> Result<Self, GatewayError> {
        let path = image_path.as_ref();
        let image = ImageAttachment::from_file(path).map_err(|e| GatewayError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self {
            model_id: model_id.into(),
            prompt_text: prompt_text.into(),
            image: Some(image),
            params,
        })
    }

    pub fn image_digest(&self) -> Option<&ImageDigest> {
        self.image.as_ref().map(|i| &i.digest)
    }

    pub fn key(&self) -> String {
        cache_key(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmExchange {
    pub request: LmmRequest,
    /// Provider text verbatim, minus trailing newlines.
    pub answer_text: String,
    pub latency_ms: u64,
    pub provider_meta: serde_json::Value,
    pub from_cache: bool,
}

pub(crate) fn strip_trailing_newlines(s: &str) -> &str {
    s.trim_end_matches(['\n', '\r'])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    LiveApi,
    ReplayFixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub credential_ref: Option<String>,
    pub fixture_path: Option<PathBuf>,
    pub rate_limit_rps: f64,
    /// Token bucket capacity.
    pub burst: u32,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
    /// Wire adapter kind, e.g. `gemini`.
    pub adapter: String,
    /// Seed for backoff jitter.
    pub seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::ReplayFixture,
            endpoint: None,
            credential_ref: None,
            fixture_path: None,
            rate_limit_rps: 1.0,
            burst: 1,
            max_retries: 3,
            backoff_base_ms: 500,
            max_in_flight: 4,
            timeout_ms: 60_000,
            adapter: "gemini".into(),
            seed: 0,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_string()));
        match self.kind {
            ProviderKind::LiveApi => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return bad("live provider needs an endpoint");
                }
                if self.credential_ref.as_deref().is_none_or(str::is_empty) {
                    return bad("live provider needs credential_ref");
                }
            }
            ProviderKind::ReplayFixture => {
                if self.fixture_path.as_ref().is_none_or(|p| p.as_os_str().is_empty()) {
                    return bad("replay provider needs fixture_path");
                }
            }
        }
        if !(self.rate_limit_rps > 0.0 && self.rate_limit_rps.is_finite()) {
            return bad("rate_limit_rps must be positive");
        }
        if self.burst == 0 {
            return bad("burst must be at least 1");
        }
        if self.backoff_base_ms == 0 {
            return bad("backoff_base_ms must be positive");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("no fixture for key {key} (prompt {prompt:?})")]
    FixtureMiss { key: String, prompt: String },
    #[error("authentication failed: {0}")]
    Authentication(String),
    #[error("provider refused to answer ({model_id}): {detail}")]
    SafetyRefusal { model_id: String, detail: String },
    #[error("request rejected by provider: {0}")]
    MalformedRequest(String),
    #[error("network access disabled (NO_NETWORK=1)")]
    NetworkDisabled,
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("fixture file {path}: {message}")]
    Fixture { path: PathBuf, message: String },
    #[error("cache: {0}")]
    Cache(String),
}

impl GatewayError {
    pub fn is_refusal(&self) -> bool {
        matches!(self, GatewayError::SafetyRefusal { .. })
    }
}

/// Anything that can answer an [`LmmRequest`].
pub trait LmmProvider: Send + Sync {
    fn query(&self, request: &LmmRequest) -> Result<LmmExchange, GatewayError>;
}

impl<P: LmmProvider + ?Sized> LmmProvider for Arc<P> {
    fn query(&self, request: &LmmRequest) -> Result<LmmExchange, GatewayError> {
        (**self).query(request)
    }
}

/// A provider plus an optional response cache.
#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn LmmProvider>,
    cache: Option<CacheStore>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn LmmProvider>) -> Self {
        Self { provider, cache: None }
    }

    pub fn with_cache(mut self, cache: CacheStore) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn cache(&self) -> Option<&CacheStore> {
        self.cache.as_ref()
    }

    pub fn provider(&self) -> &Arc<dyn LmmProvider> {
        &self.provider
    }

    /// Goes through the cache when one is attached.
    pub fn query(&self, request: &LmmRequest) -> Result<LmmExchange, GatewayError> {
        match &self.cache {
            Some(cache) => query_cached(self.provider.as_ref(), cache, request),
            None => self.provider.query(request),
        }
    }

    /// Skips the cache lookup; successful answers are still persisted.
    pub fn query_fresh(&self, request: &LmmRequest) -> Result<LmmExchange, GatewayError> {
        let exchange = self.provider.query(request)?;
        if let Some(cache) = &self.cache {
            cache.put(&FixtureRecord::from_exchange(&exchange))?;
        }
        Ok(exchange)
    }
}

/// Cache hit: the stored answer with `from_cache = true` and no provider
/// call. Miss: asks the provider and persists the exchange first. Refusals
/// are never cached.
pub fn query_cached(
    provider: &dyn LmmProvider,
    cache: &CacheStore,
    request: &LmmRequest,
) -> Result<LmmExchange, GatewayError> {
    let key = cache_key(request);
    if let Some(record) = cache.get(&key)? {
        if !record.refusal {
            return Ok(LmmExchange {
                request: request.clone(),
                answer_text: record.answer_text,
                latency_ms: 0,
                provider_meta: serde_json::json!({ "cache_key": key, "recorded_at": record.recorded_at }),
                from_cache: true,
            });
        }
    }
    let exchange = provider.query(request)?;
    cache.put(&FixtureRecord::from_exchange(&exchange))?;
    Ok(exchange)
}
