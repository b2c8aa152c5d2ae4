use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    model: String,
    provider: String,
    vector: Vec<f64>,
}

type CacheKey = (String, String, String);

/// Embedding cache keyed by `(provider, model, text hash)`.
///
/// When backed by a file, every insert appends one JSON line; loading skips
/// lines that fail to parse. Identical keys race benignly: the provider is
/// deterministic, so the last write carries the same vector.
#[derive(Debug)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<CacheKey, Vec<f64>>>,
    file: Option<(PathBuf, Mutex<File>)>,
    skipped: usize,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        EmbeddingCache {
            entries: RwLock::new(HashMap::new()),
            file: None,
            skipped: 0,
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut skipped = 0;
        if path.exists() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(r) if r.vector.iter().all(|v| v.is_finite()) && !r.vector.is_empty() => {
                        entries.insert((r.provider, r.model, r.key), r.vector);
                    }
                    _ => {
                        skipped += 1;
                        log::warn!("{}:{}: skipping corrupt cache entry", path.display(), i + 1);
                    }
                }
            }
        } else if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(EmbeddingCache {
            entries: RwLock::new(entries),
            file: Some((path.to_path_buf(), Mutex::new(file))),
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Corrupt lines skipped while loading.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn get(&self, provider: &str, model: &str, text_hash: &str) -> Option<Vec<f64>> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&(provider.to_string(), model.to_string(), text_hash.to_string()))
            .cloned()
    }

    pub fn insert(&self, provider: &str, model: &str, text_hash: &str, vector: Vec<f64>) -> Result<()> {
        if let Some((path, file)) = &self.file {
            let record = CacheRecord {
                key: text_hash.to_string(),
                model: model.to_string(),
                provider: provider.to_string(),
                vector: vector.clone(),
            };
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            let mut f = file.lock().expect("cache file lock");
            f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert((provider.to_string(), model.to_string(), text_hash.to_string()), vector);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persists_and_skips_corrupt_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache.insert("local", "m", "h1", vec![1.0, 2.0]).unwrap();
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"key\": truncated\n")
            .unwrap();
        let cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.get("local", "m", "h1"), Some(vec![1.0, 2.0]));
        assert_eq!(cache.get("local", "other", "h1"), None);
        assert_eq!(cache.skipped(), 1);
    }
}
