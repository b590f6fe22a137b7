//! TOML run configuration with dotted-key overrides.
//!
//! A config file has four optional tables, `[pipeline]`, `[provider]`,
//! `[backend]` and `[cache]`. Every accepted key is listed in [`SCHEMA`];
//! anything else is rejected. Overrides such as `provider.burst=2` are parsed
//! according to the schema type of their key.
//!
//! ```
//! use lmmclip::config::Config;
//!
//! let cfg = Config::from_toml_str(
//!     "[pipeline]\nmode = \"tlac\"\n",
//!     &[("provider.fixture_path".into(), "fixtures.jsonl".into())],
//! )
//! .unwrap();
//! assert_eq!(cfg.pipeline_config().unwrap().mode.to_string(), "tlac");
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use crate::embed::{BackendKind, EmbedError, EmbeddingBackend, ReferenceHashBackend, RemoteEmbeddingBackend};
use crate::gateway::{
    AdapterRegistry, CacheStore, Gateway, GatewayError, GenerationParams, LiveProvider, ProviderConfig, ProviderKind,
    ReplayProvider,
};
use crate::http::UreqTransport;
use crate::labels::{LabelError, PromptTemplate};
use crate::pipeline::{PipelineConfig, PipelineMode, RefusalPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueType {
    Str,
    Int,
    Float,
    Bool,
}

impl ValueType {
    pub fn name(self) -> &'static str {
        match self {
            ValueType::Str => "string",
            ValueType::Int => "integer",
            ValueType::Float => "float",
            ValueType::Bool => "bool",
        }
    }
}

/// Every accepted key: (dotted key, type, help).
pub const SCHEMA: &[(&str, ValueType, &str)] = &[
    ("pipeline.mode", ValueType::Str, "slac | tlac | lmm-only"),
    ("pipeline.stage1_model", ValueType::Str, "model for the describing stage"),
    ("pipeline.stage2_model", ValueType::Str, "model for the label-choosing stage (tlac)"),
    ("pipeline.stage1_prompt", ValueType::Str, "first-stage question"),
    ("pipeline.include_classes_in_stage1", ValueType::Bool, "append the class list to the first prompt"),
    ("pipeline.label_template", ValueType::Str, "label template with one {} placeholder"),
    ("pipeline.refusal_policy", ValueType::Str, "count-wrong | retry-once-then-wrong"),
    ("pipeline.stage2_sends_image", ValueType::Bool, "re-send the image in stage two"),
    ("pipeline.temperature", ValueType::Float, "sampling temperature"),
    ("pipeline.max_output_tokens", ValueType::Int, "generation length cap"),
    ("provider.kind", ValueType::Str, "live | replay"),
    ("provider.endpoint", ValueType::Str, "API base URL (live)"),
    ("provider.credential_ref", ValueType::Str, "name of the env var holding the API key"),
    ("provider.fixture_path", ValueType::Str, "fixture file (replay)"),
    ("provider.rate_limit_rps", ValueType::Float, "sustained requests per second"),
    ("provider.burst", ValueType::Int, "token bucket capacity"),
    ("provider.max_retries", ValueType::Int, "retries on transient failures"),
    ("provider.backoff_base_ms", ValueType::Int, "first backoff delay"),
    ("provider.max_in_flight", ValueType::Int, "concurrent request cap"),
    ("provider.timeout_ms", ValueType::Int, "per-request timeout"),
    ("provider.adapter", ValueType::Str, "wire adapter kind"),
    ("provider.seed", ValueType::Int, "backoff jitter seed"),
    ("backend.kind", ValueType::Str, "reference-hash | model-file | remote-service"),
    ("backend.dim", ValueType::Int, "embedding dimension"),
    ("backend.model_path", ValueType::Str, "ONNX text encoder (model-file)"),
    ("backend.merges_path", ValueType::Str, "BPE merges file (model-file)"),
    ("backend.endpoint", ValueType::Str, "embedding service URL (remote-service)"),
    ("backend.model", ValueType::Str, "embedding model name (remote-service)"),
    ("cache.enabled", ValueType::Bool, "use the response cache"),
    ("cache.dir", ValueType::Str, "response cache directory"),
];

pub fn schema_type(key: &str) -> Option<ValueType> {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, t, _)| *t)
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {message}")]
    BadValue { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub mode: PipelineMode,
    pub stage1_model: String,
    pub stage2_model: Option<String>,
    pub stage1_prompt: String,
    pub include_classes_in_stage1: bool,
    pub label_template: String,
    pub refusal_policy: RefusalPolicy,
    pub stage2_sends_image: bool,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let d = PipelineConfig::default();
        Self {
            mode: d.mode,
            stage1_model: d.stage1_model_id,
            stage2_model: d.stage2_model_id,
            stage1_prompt: d.stage1_prompt,
            include_classes_in_stage1: d.include_classes_in_stage1,
            label_template: d.label_template.template_text().to_string(),
            refusal_policy: d.refusal_policy,
            stage2_sends_image: d.stage2_sends_image,
            temperature: d.generation.temperature,
            max_output_tokens: d.generation.max_output_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderChoice {
    Live,
    Replay,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderChoice,
    pub endpoint: Option<String>,
    pub credential_ref: Option<String>,
    pub fixture_path: Option<PathBuf>,
    pub rate_limit_rps: f64,
    pub burst: u32,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
    pub adapter: String,
    pub seed: u64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        let d = ProviderConfig::default();
        Self {
            kind: ProviderChoice::Replay,
            endpoint: Some("https://generativelanguage.googleapis.com/v1beta".into()),
            credential_ref: Some("GEMINI_API_KEY".into()),
            fixture_path: d.fixture_path,
            rate_limit_rps: d.rate_limit_rps,
            burst: d.burst,
            max_retries: d.max_retries,
            backoff_base_ms: d.backoff_base_ms,
            max_in_flight: d.max_in_flight,
            timeout_ms: d.timeout_ms,
            adapter: d.adapter,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub dim: Option<usize>,
    pub model_path: Option<PathBuf>,
    pub merges_path: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::ReferenceHash,
            dim: None,
            model_path: None,
            merges_path: None,
            endpoint: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub enabled: bool,
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pipeline: PipelineSection,
    pub provider: ProviderSection,
    pub backend: BackendSection,
    pub cache: CacheSection,
}

fn parse_override(key: &str, raw: &str) -> Result<toml::Value, ConfigError> {
    let ty = schema_type(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    let bad = |m: String| ConfigError::BadValue {
        key: key.to_string(),
        message: m,
    };
    Ok(match ty {
        ValueType::Str => toml::Value::String(raw.to_string()),
        ValueType::Int => toml::Value::Integer(raw.trim().parse().map_err(|e| bad(format!("{raw:?}: {e}")))?),
        ValueType::Float => toml::Value::Float(raw.trim().parse().map_err(|e| bad(format!("{raw:?}: {e}")))?),
        ValueType::Bool => toml::Value::Boolean(raw.trim().parse().map_err(|e| bad(format!("{raw:?}: {e}")))?),
    })
}

fn check_keys(table: &toml::Table) -> Result<(), ConfigError> {
    for (section, value) in table {
        let inner = value
            .as_table()
            .ok_or_else(|| ConfigError::UnknownKey(section.clone()))?;
        for (k, v) in inner {
            let key = format!("{section}.{k}");
            let ty = schema_type(&key).ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
            let ok = match ty {
                ValueType::Str => v.is_str(),
                ValueType::Int => v.is_integer(),
                ValueType::Float => v.is_float() || v.is_integer(),
                ValueType::Bool => v.is_bool(),
            };
            if !ok {
                return Err(ConfigError::BadValue {
                    key,
                    message: format!("expected {}", ty.name()),
                });
            }
        }
    }
    Ok(())
}

/// Splits `key=value` as given on the command line.
pub fn split_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.to_string()))
}

impl Config {
    /// Reads `path` (or starts from defaults) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        check_keys(&table)?;
        for (key, raw) in overrides {
            let value = parse_override(key, raw)?;
            let (section, field) = key.split_once('.').expect("schema keys are dotted");
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            entry
                .as_table_mut()
                .expect("checked above")
                .insert(field.to_string(), value);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, ConfigError> {
        let p = &self.pipeline;
        let cfg = PipelineConfig {
            mode: p.mode,
            stage1_model_id: p.stage1_model.clone(),
            stage2_model_id: p.stage2_model.clone(),
            stage1_prompt: p.stage1_prompt.clone(),
            include_classes_in_stage1: p.include_classes_in_stage1,
            label_template: if p.label_template == PromptTemplate::identity().template_text() {
                PromptTemplate::identity()
            } else {
                PromptTemplate::new("config", &p.label_template)?
            },
            refusal_policy: p.refusal_policy,
            stage2_sends_image: p.stage2_sends_image,
            generation: GenerationParams {
                temperature: p.temperature,
                max_output_tokens: p.max_output_tokens,
            },
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn provider_config(&self) -> Result<ProviderConfig, ConfigError> {
        let p = &self.provider;
        let cfg = ProviderConfig {
            kind: match p.kind {
                ProviderChoice::Live => ProviderKind::LiveApi,
                ProviderChoice::Replay => ProviderKind::ReplayFixture,
            },
            endpoint: p.endpoint.clone(),
            credential_ref: p.credential_ref.clone(),
            fixture_path: p.fixture_path.clone(),
            rate_limit_rps: p.rate_limit_rps,
            burst: p.burst,
            max_retries: p.max_retries,
            backoff_base_ms: p.backoff_base_ms,
            max_in_flight: p.max_in_flight,
            timeout_ms: p.timeout_ms,
            adapter: p.adapter.clone(),
            seed: p.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `None` in LMM-only mode, which never embeds.
    pub fn build_backend(&self) -> Result<Option<Arc<dyn EmbeddingBackend>>, ConfigError> {
        if self.pipeline.mode == PipelineMode::LmmOnly {
            return Ok(None);
        }
        let b = &self.backend;
        let missing = |k: &str| ConfigError::Invalid(format!("backend.kind {} needs backend.{k}", b.kind));
        let backend: Arc<dyn EmbeddingBackend> = match b.kind {
            BackendKind::ReferenceHash => {
                Arc::new(ReferenceHashBackend::new(b.dim.unwrap_or(crate::embed::DEFAULT_REFERENCE_DIM))?)
            }
            BackendKind::RemoteService => {
                let endpoint = b.endpoint.clone().ok_or_else(|| missing("endpoint"))?;
                let model = b.model.clone().ok_or_else(|| missing("model"))?;
                let dim = b.dim.ok_or_else(|| missing("dim"))?;
                let transport = Arc::new(UreqTransport::new(Duration::from_millis(self.provider.timeout_ms)));
                Arc::new(RemoteEmbeddingBackend::new(endpoint, model, dim, transport))
            }
            BackendKind::ModelFile => self.model_file_backend()?,
        };
        Ok(Some(backend))
    }

    #[cfg(feature = "onnx")]
    fn model_file_backend(&self) -> Result<Arc<dyn EmbeddingBackend>, ConfigError> {
        use crate::embed::{share_backend, OnnxTextEncoder, OnnxTextEncoderOptions};
        let b = &self.backend;
        let missing = |k: &str| ConfigError::Invalid(format!("backend.kind model-file needs backend.{k}"));
        let mut opts = OnnxTextEncoderOptions::new(
            b.model_path.as_ref().ok_or_else(|| missing("model_path"))?,
            b.merges_path.as_ref().ok_or_else(|| missing("merges_path"))?,
        );
        if let Some(dim) = b.dim {
            opts.dim = dim;
        }
        Ok(share_backend(OnnxTextEncoder::load(&opts)?))
    }

    #[cfg(not(feature = "onnx"))]
    fn model_file_backend(&self) -> Result<Arc<dyn EmbeddingBackend>, ConfigError> {
        Err(ConfigError::Embed(EmbedError::BackendUnavailable(
            "model-file backend needs the `onnx` feature".into(),
        )))
    }

    /// Builds the provider and, when enabled, attaches the response cache.
    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        let cfg = self.provider_config()?;
        let gateway = match cfg.kind {
            ProviderKind::ReplayFixture => {
                let path = cfg.fixture_path.clone().expect("validated");
                Gateway::new(Arc::new(ReplayProvider::load(path)?))
            }
            ProviderKind::LiveApi => Gateway::new(Arc::new(LiveProvider::from_env(
                cfg,
                &AdapterRegistry::default(),
                None,
            )?)),
        };
        Ok(match (&self.cache.dir, self.cache.enabled) {
            (Some(dir), true) => gateway.with_cache(CacheStore::open(dir)?),
            (None, true) => return Err(ConfigError::Invalid("cache.enabled needs cache.dir".into())),
            _ => gateway,
        })
    }
}
