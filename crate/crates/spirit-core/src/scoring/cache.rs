//! Persistent score cache. Both refinement loops re-score heavily
//! overlapping texts; entries are keyed by a content hash of
//! (backend id, prompt, continuation).

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};

use super::{ScoreBackend, ScoreError, ScoreResult};

/// In-memory map with optional directory persistence. Reads are concurrent;
/// writes are serialized.
#[derive(Debug, Default)]
pub struct ScoreCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<String, ScoreResult>>,
    write_lock: Mutex<()>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct CacheStats {
    pub memory_entries: usize,
    pub disk_entries: usize,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Cache persisted under `dir` (created if missing).
    pub fn persistent(dir: impl Into<PathBuf>) -> Result<Self, ScoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| ScoreError::Cache(format!("creating {}: {e}", dir.display())))?;
        Ok(Self {
            dir: Some(dir),
            mem: RwLock::new(HashMap::new()),
            write_lock: Mutex::new(()),
        })
    }

    pub fn key(backend_id: &str, prompt: &str, continuation: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(backend_id.as_bytes());
        hasher.update([0x1f]);
        hasher.update(prompt.as_bytes());
        hasher.update([0x1f]);
        hasher.update(continuation.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn get(&self, key: &str) -> Option<ScoreResult> {
        if let Some(hit) = self.mem.read().expect("cache lock").get(key) {
            return Some(hit.clone());
        }
        let dir = self.dir.as_ref()?;
        let path = dir.join(format!("{key}.json"));
        let data = fs::read_to_string(path).ok()?;
        let result: ScoreResult = serde_json::from_str(&data).ok()?;
        self.mem
            .write()
            .expect("cache lock")
            .insert(key.to_string(), result.clone());
        Some(result)
    }

    pub fn put(&self, key: &str, result: &ScoreResult) -> Result<(), ScoreError> {
        let _guard = self.write_lock.lock().expect("cache write lock");
        self.mem
            .write()
            .expect("cache lock")
            .insert(key.to_string(), result.clone());
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.json"));
            let tmp = dir.join(format!("{key}.json.tmp"));
            let data = serde_json::to_string(result)
                .map_err(|e| ScoreError::Cache(format!("serializing entry: {e}")))?;
            fs::write(&tmp, data)
                .map_err(|e| ScoreError::Cache(format!("writing {}: {e}", tmp.display())))?;
            fs::rename(&tmp, &path)
                .map_err(|e| ScoreError::Cache(format!("renaming into {}: {e}", path.display())))?;
        }
        Ok(())
    }

    /// Drops every entry, in memory and on disk.
    pub fn clear(&self) -> Result<usize, ScoreError> {
        let _guard = self.write_lock.lock().expect("cache write lock");
        let mut removed = self.mem.write().expect("cache lock").drain().count();
        if let Some(dir) = &self.dir {
            removed = 0;
            for entry in fs::read_dir(dir)
                .map_err(|e| ScoreError::Cache(format!("reading {}: {e}", dir.display())))?
            {
                let entry = entry.map_err(|e| ScoreError::Cache(e.to_string()))?;
                if entry.path().extension().is_some_and(|e| e == "json") {
                    fs::remove_file(entry.path())
                        .map_err(|e| ScoreError::Cache(e.to_string()))?;
                    removed += 1;
                }
            }
        }
        Ok(removed)
    }

    pub fn stats(&self) -> Result<CacheStats, ScoreError> {
        let memory_entries = self.mem.read().expect("cache lock").len();
        let disk_entries = match &self.dir {
            None => 0,
            Some(dir) => fs::read_dir(dir)
                .map_err(|e| ScoreError::Cache(format!("reading {}: {e}", dir.display())))?
                .filter_map(Result::ok)
                .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                .count(),
        };
        Ok(CacheStats {
            memory_entries,
            disk_entries,
        })
    }
}

/// Wraps a backend with the cache; scoring the same request twice returns
/// bit-identical results.
pub struct CachedScorer {
    inner: Arc<dyn ScoreBackend>,
    cache: Arc<ScoreCache>,
}

impl CachedScorer {
    pub fn new(inner: Arc<dyn ScoreBackend>, cache: Arc<ScoreCache>) -> Self {
        Self { inner, cache }
    }
}

impl ScoreBackend for CachedScorer {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, ScoreError> {
        let key = ScoreCache::key(self.inner.backend_id(), prompt, continuation);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let result = self.inner.score(prompt, continuation)?;
        self.cache.put(&key, &result)?;
        Ok(result)
    }

    fn count_tokens(&self, text: &str) -> Option<usize> {
        self.inner.count_tokens(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::NgramOracle;

    #[test]
    fn cache_is_transparent_cold_and_warm() {
        let oracle = Arc::new(NgramOracle::train(2, 1.0, ["a b a b"]).unwrap());
        let direct = oracle.score("a", "b a").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ScoreCache::persistent(dir.path()).unwrap());
        let cached = CachedScorer::new(oracle.clone(), cache.clone());
        let cold = cached.score("a", "b a").unwrap();
        let warm = cached.score("a", "b a").unwrap();
        assert_eq!(direct, cold);
        assert_eq!(cold, warm);

        // A fresh wrapper over the same directory reads the persisted entry.
        let cache2 = Arc::new(ScoreCache::persistent(dir.path()).unwrap());
        let cached2 = CachedScorer::new(oracle, cache2.clone());
        assert_eq!(cached2.score("a", "b a").unwrap(), direct);
        assert_eq!(cache2.stats().unwrap().disk_entries, 1);
    }

    #[test]
    fn clear_empties_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::persistent(dir.path()).unwrap();
        let result = ScoreResult {
            prompt_echo: "p".into(),
            tokens: vec![],
            backend_id: "b".into(),
        };
        cache.put("k1", &result).unwrap();
        cache.put("k2", &result).unwrap();
        assert_eq!(cache.clear().unwrap(), 2);
        assert_eq!(cache.stats().unwrap().disk_entries, 0);
        assert!(cache.get("k1").is_none());
    }
}
