//! Run manifest: configuration snapshot plus per-stage input and output
//! hashes. Wall-clock and call counts live in a separate accounting file so
//! the manifest itself is reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{content_hash, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ACCOUNTING_FILE: &str = "accounting.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    /// Upstream stage digests and external input digests.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory -> sha256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
}

impl StageRecord {
    /// Digest over the output table.
    pub fn digest(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        for (k, v) in &self.outputs {
            parts.push(k);
            parts.push(v);
        }
        content_hash(&parts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub backend: String,
    pub seed: u64,
    pub corpus_digest: String,
    pub config: Value,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> io::Result<RunManifest> {
        let text = fs::read_to_string(run_dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, run_dir: &Path) -> io::Result<()> {
        write_atomic(&run_dir.join(MANIFEST_FILE), to_pretty(self).as_bytes())
    }
}

/// Call counts and elapsed time per stage, latest invocation only.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Accounting {
    pub stages: BTreeMap<String, StageAccounting>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageAccounting {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub wall_ms: u128,
}

impl Accounting {
    pub fn load_or_default(run_dir: &Path) -> Accounting {
        fs::read_to_string(run_dir.join(ACCOUNTING_FILE))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, run_dir: &Path) -> io::Result<()> {
        write_atomic(&run_dir.join(ACCOUNTING_FILE), to_pretty(self).as_bytes())
    }
}

pub fn to_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Relative paths (with `/` separators) of every file under `root`, sorted.
pub fn list_files(root: &Path) -> io::Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel: PathBuf = path.strip_prefix(root).expect("under root").to_path_buf();
                out.push(
                    rel.components()
                        .map(|c| c.as_os_str().to_string_lossy().into_owned())
                        .collect::<Vec<_>>()
                        .join("/"),
                );
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

/// Digest over every file path and content under `root`.
pub fn tree_digest(root: &Path) -> io::Result<String> {
    let mut parts = Vec::new();
    for rel in list_files(root)? {
        let h = file_sha256(&root.join(&rel))?;
        parts.push(rel);
        parts.push(h);
    }
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    Ok(content_hash(&refs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_digest_tracks_names_and_content() {
        let d = tempfile::tempdir().unwrap();
        fs::create_dir_all(d.path().join("a/b")).unwrap();
        fs::write(d.path().join("a/b/x.txt"), "1").unwrap();
        fs::write(d.path().join("y.txt"), "2").unwrap();
        assert_eq!(list_files(d.path()).unwrap(), ["a/b/x.txt", "y.txt"]);
        let first = tree_digest(d.path()).unwrap();
        assert_eq!(first, tree_digest(d.path()).unwrap());
        fs::write(d.path().join("y.txt"), "3").unwrap();
        let second = tree_digest(d.path()).unwrap();
        assert_ne!(first, second);
        fs::rename(d.path().join("y.txt"), d.path().join("z.txt")).unwrap();
        assert_ne!(second, tree_digest(d.path()).unwrap());
    }

    #[test]
    fn manifest_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let mut m = RunManifest {
            run_id: "r".into(),
            backend: "mock:x".into(),
            seed: 3,
            corpus_digest: "c".into(),
            config: serde_json::json!({"seed": 3}),
            stages: BTreeMap::new(),
        };
        m.stages.insert(
            "ingest".into(),
            StageRecord {
                outputs: [("a.json".to_string(), "h".to_string())].into(),
                ..Default::default()
            },
        );
        m.save(d.path()).unwrap();
        let text = fs::read_to_string(d.path().join(MANIFEST_FILE)).unwrap();
        assert!(!text.contains("params"));
        assert_eq!(RunManifest::load(d.path()).unwrap(), m);
        assert_ne!(m.stages["ingest"].digest(), StageRecord::default().digest());
    }
}
