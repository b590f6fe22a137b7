//! Content-addressed response cache: one record file per key.
//!
//! Writes go through a temp file and an atomic rename, so concurrent writers
//! of the same key resolve to last-write-wins and readers never see torn
//! records. Records that fail their integrity check are moved to
//! `quarantine/` and treated as misses.

use std::fs;
use std::path::{Path, PathBuf};

use super::record::{atomic_write, FixtureRecord};
use super::GatewayError;

const RECORD_EXT: &str = "jsonl";
const QUARANTINE_DIR: &str = "quarantine";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub records: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct CacheStore {
    dir: PathBuf,
}

fn cache_err(e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Cache(e.to_string())
}

impl CacheStore {
    /// Opens (creating if needed) a cache directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| cache_err(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    /// Opens an existing directory without creating it.
    pub fn open_existing(dir: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let dir = dir.as_ref().to_path_buf();
        if !dir.is_dir() {
            return Err(cache_err(format!("{} is not a cache directory", dir.display())));
        }
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.{RECORD_EXT}"))
    }

    fn quarantine(&self, path: &Path, key: &str) {
        let qdir = self.dir.join(QUARANTINE_DIR);
        let target = qdir.join(format!("{key}.{}.{RECORD_EXT}", chrono::Utc::now().timestamp_micros()));
        if let Err(e) = fs::create_dir_all(&qdir).and_then(|_| fs::rename(path, &target)) {
            log::warn!("could not quarantine {}: {e}", path.display());
        }
    }

    fn read_record(path: &Path, key: &str) -> Result<FixtureRecord, String> {
        let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
        let rec = FixtureRecord::parse_line(text.trim_end_matches('\n'))?;
        if rec.key != key {
            return Err(format!("record stored under {key} has key {}", rec.key));
        }
        rec.verify()?;
        Ok(rec)
    }

    /// `Ok(None)` on a miss or on a corrupt record (which gets quarantined).
    pub fn get(&self, key: &str) -> Result<Option<FixtureRecord>, GatewayError> {
        let path = self.path_for(key);
        if !path.exists() {
            return Ok(None);
        }
        match Self::read_record(&path, key) {
            Ok(rec) => Ok(Some(rec)),
            Err(why) => {
                log::warn!("cache record {key} is corrupt ({why}); quarantined and refetching");
                self.quarantine(&path, key);
                Ok(None)
            }
        }
    }

    pub fn put(&self, record: &FixtureRecord) -> Result<(), GatewayError> {
        let mut line = record.to_line();
        line.push('\n');
        atomic_write(&self.path_for(&record.key), line.as_bytes()).map_err(cache_err)
    }

    fn record_files(&self) -> Result<Vec<(String, PathBuf)>, GatewayError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(cache_err)? {
            let path = entry.map_err(cache_err)?.path();
            if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some(RECORD_EXT) {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn stats(&self) -> Result<CacheStats, GatewayError> {
        let mut stats = CacheStats::default();
        for (_, path) in self.record_files()? {
            stats.records += 1;
            stats.bytes += fs::metadata(&path).map_err(cache_err)?.len();
        }
        Ok(stats)
    }

    /// Re-checks every record; returns the keys of corrupt ones (left in place).
    pub fn verify(&self) -> Result<Vec<(String, String)>, GatewayError> {
        let mut bad = Vec::new();
        for (key, path) in self.record_files()? {
            if let Err(why) = Self::read_record(&path, &key) {
                bad.push((key, why));
            }
        }
        Ok(bad)
    }

    /// Removes all records and the quarantine; returns how many records went.
    pub fn clear(&self) -> Result<usize, GatewayError> {
        let files = self.record_files()?;
        for (_, path) in &files {
            fs::remove_file(path).map_err(cache_err)?;
        }
        let q = self.dir.join(QUARANTINE_DIR);
        if q.exists() {
            fs::remove_dir_all(&q).map_err(cache_err)?;
        }
        Ok(files.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{query_cached, GenerationParams, LmmExchange, LmmProvider, LmmRequest};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting(AtomicUsize);

    impl LmmProvider for Counting {
        fn query(&self, request: &LmmRequest) -> Result<LmmExchange, GatewayError> {
            let n = self.0.fetch_add(1, Ordering::SeqCst);
            Ok(LmmExchange {
                request: request.clone(),
                answer_text: format!("answer {n}"),
                latency_ms: 1,
                provider_meta: serde_json::Value::Null,
                from_cache: false,
            })
        }
    }

    fn req(p: &str) -> LmmRequest {
        LmmRequest::text_only("m", p, GenerationParams::default())
    }

    #[test]
    fn hit_after_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CacheStore::open(dir.path()).unwrap();
        let p = Counting(AtomicUsize::new(0));
        let first = query_cached(&p, &cache, &req("a")).unwrap();
        let second = query_cached(&p, &cache, &req("a")).unwrap();
        assert!(!first.from_cache);
        assert!(second.from_cache);
        assert_eq!(second.answer_text, first.answer_text);
        assert_eq!(p.0.load(Ordering::SeqCst), 1);
        assert_eq!(cache.stats().unwrap().records, 1);
    }

    #[test]
    fn corrupt_record_is_quarantined_and_refetched() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CacheStore::open(dir.path()).unwrap();
        let p = Counting(AtomicUsize::new(0));
        query_cached(&p, &cache, &req("a")).unwrap();
        let key = req("a").key();
        let path = cache.path_for(&key);
        let text = fs::read_to_string(&path).unwrap().replace("answer 0", "answer X");
        fs::write(&path, text).unwrap();

        assert_eq!(cache.verify().unwrap().len(), 1);
        let again = query_cached(&p, &cache, &req("a")).unwrap();
        assert!(!again.from_cache);
        assert_eq!(again.answer_text, "answer 1");
        assert!(cache.verify().unwrap().is_empty());
        assert_eq!(fs::read_dir(dir.path().join(QUARANTINE_DIR)).unwrap().count(), 1);
    }

    #[test]
    fn stats_and_clear() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CacheStore::open(dir.path()).unwrap();
        assert_eq!(cache.stats().unwrap(), CacheStats::default());
        let p = Counting(AtomicUsize::new(0));
        for q in ["a", "b", "c"] {
            query_cached(&p, &cache, &req(q)).unwrap();
        }
        let s = cache.stats().unwrap();
        assert_eq!(s.records, 3);
        assert!(s.bytes > 0);
        assert_eq!(cache.clear().unwrap(), 3);
        assert_eq!(cache.stats().unwrap().records, 0);
        assert!(CacheStore::open_existing(dir.path().join("nope")).is_err());
    }

    #[test]
    fn concurrent_writers_same_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CacheStore::open(dir.path()).unwrap();
        std::thread::scope(|s| {
            for i in 0..8 {
                let cache = &cache;
                s.spawn(move || {
                    let rec = FixtureRecord::new(&req("same"), format!("v{i}"), false, "t");
                    cache.put(&rec).unwrap();
                    let _ = cache.get(&rec.key).unwrap();
                });
            }
        });
        assert!(cache.verify().unwrap().is_empty());
        assert_eq!(cache.stats().unwrap().records, 1);
    }
}
