use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Completion, LmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum CachedResponse {
    Completion(Completion),
    Embedding(Vec<f64>),
}

/// One line of a run cache log, and the body of a global cache entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub request: Value,
    pub response: CachedResponse,
    pub timestamp: String,
}

struct Inner {
    memory: HashMap<String, CachedResponse>,
    run_log: Option<File>,
}

/// Response cache: an in-memory map, an optional append-only JSONL log for
/// the current run and an optional content-addressed directory shared across
/// runs. Reads prefer the global directory; writes go everywhere. All writes
/// go through one mutex, so there is a single writer.
pub struct ResponseCache {
    global_dir: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            global_dir: None,
            inner: Mutex::new(Inner {
                memory: HashMap::new(),
                run_log: None,
            }),
        }
    }

    /// Opens (creating as needed) the global directory and the run log.
    /// Existing run-log entries are loaded; a malformed line is a cache error.
    pub fn open(global_dir: Option<&Path>, run_log: Option<&Path>) -> Result<Self, LmError> {
        let io = |e: std::io::Error| LmError::Cache(e.to_string());
        if let Some(dir) = global_dir {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut memory = HashMap::new();
        let mut log_file = None;
        if let Some(path) = run_log {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io)?;
            }
            if path.exists() {
                let reader = BufReader::new(File::open(path).map_err(io)?);
                for (n, line) in reader.lines().enumerate() {
                    let line = line.map_err(io)?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| {
                        LmError::Cache(format!("{}:{}: {e}", path.display(), n + 1))
                    })?;
                    memory.insert(rec.key, rec.response);
                }
            }
            log_file = Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(io)?,
            );
        }
        Ok(ResponseCache {
            global_dir: global_dir.map(Path::to_path_buf),
            inner: Mutex::new(Inner {
                memory,
                run_log: log_file,
            }),
        })
    }

    fn global_path(&self, key: &str) -> Option<PathBuf> {
        self.global_dir
            .as_ref()
            .map(|d| d.join(&key[..2.min(key.len())]).join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Result<Option<CachedResponse>, LmError> {
        if let Some(path) = self.global_path(key) {
            if path.exists() {
                let text = fs::read_to_string(&path)
                    .map_err(|e| LmError::Cache(format!("{}: {e}", path.display())))?;
                let rec: CacheRecord = serde_json::from_str(&text)
                    .map_err(|e| LmError::Cache(format!("{}: {e}", path.display())))?;
                if rec.key != key {
                    return Err(LmError::Cache(format!(
                        "{}: key mismatch ({})",
                        path.display(),
                        rec.key
                    )));
                }
                return Ok(Some(rec.response));
            }
        }
        let inner = self.inner.lock().expect("cache lock");
        Ok(inner.memory.get(key).cloned())
    }

    /// Stores a response. A key already present is left untouched, so the
    /// cache holds at most one entry per key.
    pub fn put(&self, key: &str, request: Value, response: CachedResponse) -> Result<(), LmError> {
        let mut inner = self.inner.lock().expect("cache lock");
        if inner.memory.contains_key(key) {
            return Ok(());
        }
        let record = CacheRecord {
            key: key.to_string(),
            request,
            response: response.clone(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let line = serde_json::to_string(&record).map_err(|e| LmError::Cache(e.to_string()))?;
        if let Some(path) = self.global_path(key) {
            if !path.exists() {
                let io = |e: std::io::Error| LmError::Cache(format!("{}: {e}", path.display()));
                fs::create_dir_all(path.parent().expect("has parent")).map_err(io)?;
                let tmp = path.with_extension(format!("tmp{}", std::process::id()));
                fs::write(&tmp, &line).map_err(io)?;
                fs::rename(&tmp, &path).map_err(io)?;
            }
        }
        if let Some(f) = inner.run_log.as_mut() {
            writeln!(f, "{line}").map_err(|e| LmError::Cache(e.to_string()))?;
            f.flush().map_err(|e| LmError::Cache(e.to_string()))?;
        }
        inner.memory.insert(key.to_string(), response);
        Ok(())
    }

    /// Entries written or loaded in this process (excludes unread global entries).
    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
