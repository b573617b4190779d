use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CacheKey, ClientError, Completion};

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: CacheKey,
    #[serde(flatten)]
    completion: Completion,
}

/// Append-only JSONL store of completions keyed by request digest. The
/// last line for a key wins on reload.
#[derive(Debug, Default)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    file: Option<File>,
    entries: HashMap<CacheKey, Completion>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    pub fn open(path: &Path) -> Result<Self, ClientError> {
        let err = |source| ClientError::Cache {
            path: path.display().to_string(),
            source,
        };
        let mut entries = HashMap::new();
        let mut torn_tail = false;
        if path.exists() {
            let raw = std::fs::read_to_string(path).map_err(err)?;
            torn_tail = !raw.is_empty() && !raw.ends_with('\n');
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(line) {
                    Ok(l) => {
                        entries.insert(l.key, l.completion);
                    }
                    // A torn final write from an interrupted run.
                    Err(e) => tracing::warn!(line = i + 1, error = %e, "skipping unreadable cache line"),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
        if torn_tail {
            file.write_all(b"\n").map_err(err)?;
        }
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            file: Some(file),
            entries,
        })
    }

    pub fn get(&self, key: &CacheKey) -> Option<&Completion> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: CacheKey, completion: Completion) -> Result<(), ClientError> {
        if let Some(file) = &mut self.file {
            let mut line = serde_json::to_vec(&CacheLine {
                key: key.clone(),
                completion: completion.clone(),
            })
            .expect("cache line serializes");
            line.push(b'\n');
            file.write_all(&line).map_err(|source| ClientError::Cache {
                path: self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                source,
            })?;
        }
        self.entries.insert(key, completion);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{ChatRequest, Usage};

    #[test]
    fn reload_returns_stored_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let key = CacheKey::of(&ChatRequest::new("m", "prompt"));
        let text = "line one\nline \"two\" \u{1F600}".to_string();
        {
            let mut c = ResponseCache::open(&path).unwrap();
            c.insert(key.clone(), Completion { text: text.clone(), usage: Usage { prompt_tokens: 3, completion_tokens: 4 } }).unwrap();
        }
        let mut raw = std::fs::read_to_string(&path).unwrap();
        raw.push_str("{\"key\": \"trunc");
        std::fs::write(&path, raw).unwrap();
        let mut c = ResponseCache::open(&path).unwrap();
        assert_eq!(c.len(), 1);
        let other = CacheKey::of(&ChatRequest::new("m", "other"));
        c.insert(other.clone(), Completion { text: "x".into(), usage: Usage::default() }).unwrap();
        drop(c);
        let c = ResponseCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get(&other).unwrap().text, "x");
        assert_eq!(c.get(&key).unwrap().text, text);
        assert_eq!(c.get(&key).unwrap().usage.completion_tokens, 4);
    }
}
