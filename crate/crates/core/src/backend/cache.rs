use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{sha256_hex, BackendError, CallStats, Completion, GenerationBackend, GenerationRequest};

/// The request fields that determine a cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEcho {
    pub backend: String,
    pub request_tag: String,
    pub temperature: f64,
    pub count: usize,
    pub max_tokens: u32,
    pub prompt: String,
}

impl RequestEcho {
    pub fn new(backend: &str, request: &GenerationRequest) -> Self {
        Self {
            backend: backend.to_string(),
            request_tag: request.request_tag.clone(),
            temperature: request.temperature,
            count: request.count,
            max_tokens: request.max_tokens,
            prompt: request.prompt.rendered().to_string(),
        }
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("request echo serializes");
        sha256_hex(&json)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    fingerprint: String,
    request: RequestEcho,
    completions: Vec<String>,
    created_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: u64,
}

/// One JSON file per fingerprint under a directory.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            key_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    fn lock_for(&self, fingerprint: &str) -> Arc<Mutex<()>> {
        self.key_locks
            .lock()
            .unwrap()
            .entry(fingerprint.to_string())
            .or_default()
            .clone()
    }

    /// Stored completions for `fingerprint`, marked `cached`. Corrupt entries
    /// are evicted and reported as a miss.
    pub fn lookup(&self, fingerprint: &str) -> Option<Vec<Completion>> {
        let path = self.path_for(fingerprint);
        let raw = fs::read_to_string(&path).ok()?;
        let entry = serde_json::from_str::<CacheEntry>(&raw)
            .ok()
            .filter(|e| e.fingerprint == fingerprint);
        match entry {
            Some(entry) => Some(
                entry
                    .completions
                    .into_iter()
                    .map(|text| Completion {
                        text,
                        backend_id: entry.request.backend.clone(),
                        cached: true,
                    })
                    .collect(),
            ),
            None => {
                warn!(path = %path.display(), "evicting corrupt cache entry");
                let lock = self.lock_for(fingerprint);
                let _guard = lock.lock().unwrap();
                let _ = fs::remove_file(&path);
                None
            }
        }
    }

    pub fn store(&self, request: &RequestEcho, completions: &[Completion]) -> io::Result<String> {
        let fingerprint = request.fingerprint();
        let entry = CacheEntry {
            fingerprint: fingerprint.clone(),
            request: request.clone(),
            completions: completions.iter().map(|c| c.text.clone()).collect(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        let json = serde_json::to_string_pretty(&entry).map_err(io::Error::other)?;
        let lock = self.lock_for(&fingerprint);
        let _guard = lock.lock().unwrap();
        let tmp = self.dir.join(format!("{fingerprint}.json.tmp"));
        fs::write(&tmp, json)?;
        fs::rename(&tmp, self.path_for(&fingerprint))?;
        Ok(fingerprint)
    }

    fn entry_paths(&self) -> io::Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                paths.push(path);
            }
        }
        Ok(paths)
    }

    pub fn stats(&self) -> io::Result<CacheStats> {
        let mut stats = CacheStats::default();
        for path in self.entry_paths()? {
            stats.entries += 1;
            stats.bytes += fs::metadata(&path)?.len();
        }
        Ok(stats)
    }

    /// Removes every entry; returns how many were deleted.
    pub fn clear(&self) -> io::Result<usize> {
        let paths = self.entry_paths()?;
        for path in &paths {
            fs::remove_file(path)?;
        }
        Ok(paths.len())
    }
}

/// Serves repeated requests from a [`ResponseCache`].
pub struct CachedBackend<B> {
    inner: B,
    cache: ResponseCache,
}

impl<B: GenerationBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: ResponseCache) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }
}

impl<B: GenerationBackend> GenerationBackend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn sample_completions(&self, request: &GenerationRequest) -> Result<Vec<Completion>, BackendError> {
        request.validate()?;
        let echo = RequestEcho::new(self.inner.id(), request);
        let fingerprint = echo.fingerprint();
        if let Some(hit) = self.cache.lookup(&fingerprint) {
            if hit.len() == request.count {
                return Ok(hit);
            }
        }
        let fresh = self.inner.sample_completions(request)?;
        self.cache.store(&echo, &fresh)?;
        Ok(fresh)
    }

    fn stats(&self) -> CallStats {
        self.inner.stats()
    }
}
