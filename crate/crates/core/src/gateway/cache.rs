use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{ChatResponse, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub response: ChatResponse,
}

/// Content-addressed response store: an in-memory map in front of an
/// optional directory laid out as `<root>/<first two hex>/<key>.json`.
/// Entries are never overwritten or evicted.
#[derive(Debug, Default)]
pub struct ResponseCache {
    root: Option<PathBuf>,
    memory: RwLock<HashMap<String, CacheEntry>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    pub fn on_disk(root: impl Into<PathBuf>) -> Self {
        ResponseCache {
            root: Some(root.into()),
            memory: RwLock::default(),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn entry_path(root: &Path, key: &str) -> PathBuf {
        root.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, GatewayError> {
        if let Some(e) = self.memory.read().expect("cache lock").get(key) {
            return Ok(Some(e.clone()));
        }
        let Some(root) = &self.root else { return Ok(None) };
        let path = Self::entry_path(root, key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
        self.memory.write().expect("cache lock").insert(key.to_string(), entry.clone());
        Ok(Some(entry))
    }

    pub fn put(&self, entry: CacheEntry) -> Result<(), GatewayError> {
        if let Some(root) = &self.root {
            let path = Self::entry_path(root, &entry.key);
            if !path.exists() {
                let bytes = serde_json::to_vec_pretty(&entry).expect("entry serializes");
                crate::fsutil::write_atomic(&path, &bytes)
                    .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
            }
        }
        self.memory
            .write()
            .expect("cache lock")
            .entry(entry.key.clone())
            .or_insert(entry);
        Ok(())
    }

    pub fn len_in_memory(&self) -> usize {
        self.memory.read().expect("cache lock").len()
    }
}
