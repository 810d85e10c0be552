//! Keyed on-disk response cache.
//!
//! One JSON file per request digest. Writes go through a temp file and an
//! atomic rename; unparseable entries fail loudly instead of being silently
//! refetched.

use super::{ChatRequest, CompletionClient, CompletionResponse};
use crate::{Error, Result};
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

pub struct DiskCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CompletionResponse>> {
        let path = self.path(key);
        match fs::read_to_string(&path) {
            Ok(body) => serde_json::from_str(&body)
                .map(Some)
                .map_err(|e| Error::CacheCorrupt {
                    key: key.to_string(),
                    detail: e.to_string(),
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put(&self, key: &str, response: &CompletionResponse) -> Result<()> {
        let _guard = self.write_lock.lock().unwrap();
        let tmp = self.dir.join(format!("{key}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(response)?)?;
        fs::rename(&tmp, self.path(key))?;
        Ok(())
    }
}

/// Wraps a backend with read-through caching keyed on the full request
/// digest (which includes the resample ordinal).
pub struct CachedClient<C> {
    inner: C,
    cache: DiskCache,
}

impl<C: CompletionClient> CachedClient<C> {
    pub fn new(inner: C, cache: DiskCache) -> Self {
        Self { inner, cache }
    }
}

impl<C: CompletionClient> CompletionClient for CachedClient<C> {
    fn complete(&self, request: &ChatRequest) -> Result<CompletionResponse> {
        let key = request.cache_key();
        if let Some(hit) = self.cache.get(&key)? {
            return Ok(hit);
        }
        let response = self.inner.complete(request)?;
        self.cache.put(&key, &response)?;
        Ok(response)
    }
}
