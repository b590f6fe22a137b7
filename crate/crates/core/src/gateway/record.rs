//! Fixture / cache record format.
//!
//! One JSON object per line:
//! `{key, request: {model_id, prompt_text, image_digest, generation_params},
//! answer_text, recorded_at, integrity}`. `integrity` is the SHA-256 of the
//! record serialized without the `integrity` field. Two optional fields
//! appear only when set: `refusal` (the provider declined to answer) and
//! `history` (earlier recordings for the same key, oldest first).
//!
//! Fixture files start with a header line naming the format; cache records
//! are stored one per file without a header.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::key::cache_key;
use super::{GatewayError, GenerationParams, ImageAttachment, ImageDigest, LmmExchange, LmmProvider, LmmRequest};

pub const FIXTURE_FORMAT: &str = "lmmclip-fixtures";
pub const FIXTURE_VERSION: u32 = 1;

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordedRequest {
    pub model_id: String,
    pub prompt_text: String,
    pub image_digest: Option<String>,
    pub generation_params: GenerationParams,
}

impl RecordedRequest {
    pub fn from_request(r: &LmmRequest) -> Self {
        Self {
            model_id: r.model_id.clone(),
            prompt_text: r.prompt_text.clone(),
            image_digest: r.image_digest().map(ImageDigest::to_hex),
            generation_params: r.params,
        }
    }

    /// The request this record answers. The image path is unknown, only the
    /// digest survives.
    pub fn to_request(&self) -> Option<LmmRequest> {
        let image = match &self.image_digest {
            Some(hex) => Some(ImageAttachment {
                path: PathBuf::new(),
                digest: ImageDigest::from_hex(hex)?,
            }),
            None => None,
        };
        Some(LmmRequest {
            model_id: self.model_id.clone(),
            prompt_text: self.prompt_text.clone(),
            image,
            params: self.generation_params,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorRecord {
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub refusal: bool,
    pub recorded_at: String,
    pub integrity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRecord {
    pub key: String,
    pub request: RecordedRequest,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub refusal: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<PriorRecord>,
    pub recorded_at: String,
    pub integrity: String,
}

#[derive(Serialize)]
struct RecordBody<'a> {
    key: &'a str,
    request: &'a RecordedRequest,
    answer_text: &'a str,
    #[serde(skip_serializing_if = "is_false")]
    refusal: bool,
    #[serde(skip_serializing_if = "<[PriorRecord]>::is_empty")]
    history: &'a [PriorRecord],
    recorded_at: &'a str,
}

pub(crate) fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl FixtureRecord {
    pub fn new(request: &LmmRequest, answer_text: impl Into<String>, refusal: bool, recorded_at: impl Into<String>) -> Self {
        let mut rec = Self {
            key: cache_key(request),
            request: RecordedRequest::from_request(request),
            answer_text: answer_text.into(),
            refusal,
            history: Vec::new(),
            recorded_at: recorded_at.into(),
            integrity: String::new(),
        };
        rec.integrity = rec.compute_integrity();
        rec
    }

    pub fn from_exchange(exchange: &LmmExchange) -> Self {
        Self::new(&exchange.request, exchange.answer_text.clone(), false, now_rfc3339())
    }

    pub fn refusal(request: &LmmRequest, detail: &str) -> Self {
        Self::new(request, detail, true, now_rfc3339())
    }

    pub fn compute_integrity(&self) -> String {
        let body = RecordBody {
            key: &self.key,
            request: &self.request,
            answer_text: &self.answer_text,
            refusal: self.refusal,
            history: &self.history,
            recorded_at: &self.recorded_at,
        };
        let json = serde_json::to_string(&body).expect("record body serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Checks the integrity hash and that the key matches the request.
    pub fn verify(&self) -> Result<(), String> {
        if self.compute_integrity() != self.integrity {
            return Err(format!("integrity mismatch for key {}", self.key));
        }
        let req = self
            .request
            .to_request()
            .ok_or_else(|| format!("bad image digest in record {}", self.key))?;
        if cache_key(&req) != self.key {
            return Err(format!("key {} does not match its request", self.key));
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        serde_json::from_str(line).map_err(|e| e.to_string())
    }

    /// Replaces this record's answer with `newer`'s, keeping the current
    /// answer in `history`.
    fn supersede(&mut self, newer: FixtureRecord) {
        let mut history = std::mem::take(&mut self.history);
        history.push(PriorRecord {
            answer_text: std::mem::take(&mut self.answer_text),
            refusal: self.refusal,
            recorded_at: std::mem::take(&mut self.recorded_at),
            integrity: std::mem::take(&mut self.integrity),
        });
        history.extend(newer.history);
        self.answer_text = newer.answer_text;
        self.refusal = newer.refusal;
        self.recorded_at = newer.recorded_at;
        self.history = history;
        self.integrity = self.compute_integrity();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FixtureHeader {
    format: String,
    version: u32,
}

/// An ordered set of fixture records, unique by key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureFile {
    records: Vec<FixtureRecord>,
}

impl FixtureFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[FixtureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&FixtureRecord> {
        self.records.iter().find(|r| r.key == key)
    }

    /// Inserts, or supersedes the existing record with the same key.
    pub fn upsert(&mut self, record: FixtureRecord) {
        match self.records.iter_mut().find(|r| r.key == record.key) {
            Some(existing) => existing.supersede(record),
            None => self.records.push(record),
        }
    }

    /// Convenience for building fixtures by hand.
    pub fn push_answer(&mut self, request: &LmmRequest, answer: &str, recorded_at: &str) {
        self.upsert(FixtureRecord::new(request, answer, false, recorded_at));
    }

    pub fn push_refusal(&mut self, request: &LmmRequest, detail: &str, recorded_at: &str) {
        self.upsert(FixtureRecord::new(request, detail, true, recorded_at));
    }

    pub fn to_text(&self) -> String {
        let header = FixtureHeader {
            format: FIXTURE_FORMAT.into(),
            version: FIXTURE_VERSION,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, (usize, String)> {
        let mut file = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 {
                if let Ok(h) = serde_json::from_str::<FixtureHeader>(line) {
                    if h.format != FIXTURE_FORMAT || h.version != FIXTURE_VERSION {
                        return Err((1, format!("unsupported fixture format {} v{}", h.format, h.version)));
                    }
                    continue;
                }
            }
            let rec = FixtureRecord::parse_line(line).map_err(|e| (i + 1, e))?;
            rec.verify().map_err(|e| (i + 1, e))?;
            if file.get(&rec.key).is_some() {
                return Err((i + 1, format!("duplicate key {}", rec.key)));
            }
            file.records.push(rec);
        }
        Ok(file)
    }
}

pub fn read_fixture_file(path: impl AsRef<Path>) -> Result<FixtureFile, GatewayError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GatewayError::Fixture {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    FixtureFile::parse(&text).map_err(|(line, message)| GatewayError::Fixture {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    })
}

/// Writes via a temp file and rename, so readers never see a partial file.
pub fn write_fixture_file(path: impl AsRef<Path>, file: &FixtureFile) -> Result<(), GatewayError> {
    let path = path.as_ref();
    atomic_write(path, file.to_text().as_bytes()).map_err(|e| GatewayError::Fixture {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRequest {
    pub key: String,
    pub model_id: String,
    pub prompt_text: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordSummary {
    pub recorded: usize,
    pub refusals: usize,
    pub failed: Vec<FailedRequest>,
}

pub fn failures_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".failures.json");
    out.with_file_name(name)
}

/// Queries every request and writes the answers to `out`, merging with any
/// records already there (a re-recorded key keeps its old answer in
/// `history`). Refusals are recorded as refusal records. Other failures are
/// skipped, listed in `<out>.failures.json`, and the rest is still written.
pub fn record_fixtures(
    provider: &dyn LmmProvider,
    requests: &[LmmRequest],
    out: impl AsRef<Path>,
) -> Result<RecordSummary, GatewayError> {
    let out = out.as_ref();
    let mut file = if out.exists() {
        read_fixture_file(out)?
    } else {
        FixtureFile::new()
    };
    let mut summary = RecordSummary::default();
    for req in requests {
        match provider.query(req) {
            Ok(exchange) => {
                file.upsert(FixtureRecord::from_exchange(&exchange));
                summary.recorded += 1;
            }
            Err(GatewayError::SafetyRefusal { detail, .. }) => {
                file.upsert(FixtureRecord::refusal(req, &detail));
                summary.recorded += 1;
                summary.refusals += 1;
            }
            Err(e) => {
                log::warn!("recording failed for {}: {e}", cache_key(req));
                summary.failed.push(FailedRequest {
                    key: cache_key(req),
                    model_id: req.model_id.clone(),
                    prompt_text: req.prompt_text.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    write_fixture_file(out, &file)?;
    if !summary.failed.is_empty() {
        let manifest = serde_json::json!({
            "fixture": out.display().to_string(),
            "failures": summary.failed,
        });
        let fp = failures_path(out);
        atomic_write(&fp, serde_json::to_string_pretty(&manifest).expect("json").as_bytes()).map_err(|e| {
            GatewayError::Fixture {
                path: fp.clone(),
                message: e.to_string(),
            }
        })?;
    }
    Ok(summary)
}
