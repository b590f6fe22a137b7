use std::collections::HashMap;
use std::path::Path;

use super::record::{read_fixture_file, FixtureFile, FixtureRecord};
use super::{cache_key, GatewayError, LmmExchange, LmmProvider, LmmRequest};

/// Answers requests from a recorded fixture file. Immutable after loading.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    records: HashMap<String, FixtureRecord>,
}

impl ReplayProvider {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        Ok(Self::from_file(read_fixture_file(path)?))
    }

    pub fn from_file(file: FixtureFile) -> Self {
        let records = file.records().iter().map(|r| (r.key.clone(), r.clone())).collect();
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl LmmProvider for ReplayProvider {
    fn query(&self, request: &LmmRequest) -> Result<LmmExchange, GatewayError> {
        let key = cache_key(request);
        let record = self.records.get(&key).ok_or_else(|| GatewayError::FixtureMiss {
            key: key.clone(),
            prompt: request.prompt_text.clone(),
        })?;
        if record.refusal {
            return Err(GatewayError::SafetyRefusal {
                model_id: request.model_id.clone(),
                detail: record.answer_text.clone(),
            });
        }
        Ok(LmmExchange {
            request: request.clone(),
            answer_text: record.answer_text.clone(),
            latency_ms: 0,
            provider_meta: serde_json::json!({
                "replay": true,
                "cache_key": key,
                "recorded_at": record.recorded_at,
            }),
            from_cache: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::GenerationParams;

    #[test]
    fn hit_miss_and_refusal() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("flower.jpg");
        std::fs::write(&img, b"gaillardia pixels").unwrap();
        let params = GenerationParams::default();
        let hit = LmmRequest::with_image("gemini-1.5-pro-002", "Which object?", &img, params).unwrap();
        let refused = LmmRequest::text_only("gemini-1.5-flash-002", "classes?", params);

        let mut f = FixtureFile::new();
        f.push_answer(&hit, "Gaillardia", "2024-11-01T00:00:00.000Z");
        f.push_refusal(&refused, "SAFETY", "2024-11-01T00:00:00.000Z");
        let path = dir.path().join("fx.jsonl");
        crate::gateway::write_fixture_file(&path, &f).unwrap();

        let p = ReplayProvider::load(&path).unwrap();
        let ex = p.query(&hit).unwrap();
        assert_eq!(ex.answer_text, "Gaillardia");
        assert!(!ex.from_cache);

        let miss = LmmRequest::text_only("gemini-1.5-pro-002", "Which object?", params);
        match p.query(&miss) {
            Err(GatewayError::FixtureMiss { key, prompt }) => {
                assert_eq!(key, cache_key(&miss));
                assert_eq!(prompt, "Which object?");
            }
            other => panic!("expected miss, got {other:?}"),
        }
        assert!(p.query(&refused).unwrap_err().is_refusal());
    }
}
