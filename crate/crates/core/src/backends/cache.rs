//! Content-addressed response cache.
//!
//! Layout: `<dir>/<first two hex>/<digest>.entry`, one JSON document per
//! entry. Writes go to a temporary file in the shard directory and are then
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{cache_key, Backend, BackendError, CallStats, ModelRequest, ModelResponse, Usage};
use crate::canonical::{to_canonical_value, Digest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: Digest,
    pub request: serde_json::Value,
    pub response_text: String,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: u64,
    pub timestamp: u64,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &Digest) -> PathBuf {
        self.dir.join(key.shard()).join(format!("{key}.entry"))
    }

    /// A corrupt or unreadable entry is reported as a miss.
    pub fn get(&self, key: &Digest) -> Option<CacheEntry> {
        let path = self.entry_path(key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if &entry.key == key => Some(entry),
            Ok(_) | Err(_) => {
                log::warn!("ignoring unreadable cache entry {}", path.display());
                None
            }
        }
    }

    pub fn put(&self, request: &ModelRequest, response: &ModelResponse) -> std::io::Result<CacheEntry> {
        let key = cache_key(request);
        let entry = CacheEntry {
            key: key.clone(),
            request: to_canonical_value(request).map_err(std::io::Error::other)?,
            response_text: response.text.clone(),
            usage: response.usage,
            latency_ms: response.latency_ms,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let path = self.entry_path(&key);
        let shard = path.parent().expect("entry path has a shard directory");
        fs::create_dir_all(shard)?;
        let mut tmp = tempfile::NamedTempFile::new_in(shard)?;
        tmp.write_all(&serde_json::to_vec(&entry).map_err(std::io::Error::other)?)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(entry)
    }
}

/// Serves repeated requests from a [`ResponseCache`].
pub struct Cached<B> {
    inner: B,
    cache: ResponseCache,
    stats: Arc<CallStats>,
}

impl<B: Backend> Cached<B> {
    pub fn new(inner: B, cache: ResponseCache, stats: Arc<CallStats>) -> Self {
        Self { inner, cache, stats }
    }
}

impl<B: Backend> Backend for Cached<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let key = cache_key(request);
        if let Some(entry) = self.cache.get(&key) {
            CallStats::bump(&self.stats.cache_hits);
            return Ok(ModelResponse {
                text: entry.response_text,
                usage: entry.usage,
                cached: true,
                latency_ms: 0,
                attempts: 0,
            });
        }
        CallStats::bump(&self.stats.cache_misses);
        let resp = self.inner.complete(request)?;
        self.cache.put(request, &resp).map_err(|e| BackendError::Io(format!("cache write failed: {e}")))?;
        Ok(resp)
    }
}
