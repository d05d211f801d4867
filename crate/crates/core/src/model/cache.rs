//! The prompt cache: a single-file SQLite store mapping 64-hex keys to
//! completions. Entries are append-only; the first value stored for a key
//! wins and is what every caller gets back.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rusqlite::{params, Connection, OpenFlags, OptionalExtension};

use crate::error::{Error, Result};
use crate::fingerprint::{canonical_bytes, CanonicalValue, Fingerprint};
use crate::fsutil::now_rfc3339;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS entries (
    key TEXT PRIMARY KEY NOT NULL,
    value TEXT NOT NULL,
    node TEXT,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS usage (
    node TEXT NOT NULL,
    key TEXT NOT NULL,
    PRIMARY KEY (node, key)
);
";

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub key: Fingerprint,
    pub value: String,
    /// Canonical JSON of the key's pre-image, when known.
    pub node: Option<String>,
    pub created_at: String,
}

pub struct PromptCache {
    path: PathBuf,
    conn: Mutex<Option<Connection>>,
}

impl PromptCache {
    pub fn open(path: &Path) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.busy_timeout(std::time::Duration::from_secs(30))?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(PromptCache {
            path: path.to_path_buf(),
            conn: Mutex::new(Some(conn)),
        })
    }

    /// Opens an existing cache without ever writing to it. `None` if the
    /// file does not exist.
    pub fn open_read_only(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY)?;
        Ok(Some(PromptCache {
            path: path.to_path_buf(),
            conn: Mutex::new(Some(conn)),
        }))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn with_conn<T>(&self, f: impl FnOnce(&mut Connection) -> rusqlite::Result<T>) -> Result<T> {
        let mut guard = self.conn.lock().expect("cache lock poisoned");
        let conn = guard.as_mut().ok_or(Error::SessionClosed)?;
        Ok(f(conn)?)
    }

    pub fn get(&self, key: &Fingerprint) -> Result<Option<String>> {
        self.with_conn(|c| {
            c.query_row("SELECT value FROM entries WHERE key = ?1", [key.to_hex()], |r| r.get(0))
                .optional()
        })
    }

    /// Stores `value` unless the key already has one; returns the stored value.
    pub fn insert(&self, key: &Fingerprint, value: &str, node: Option<&CanonicalValue>) -> Result<String> {
        let node = match node {
            Some(n) => Some(String::from_utf8(canonical_bytes(n)?).expect("canonical bytes are UTF-8")),
            None => None,
        };
        let created = now_rfc3339();
        self.with_conn(|c| {
            let tx = c.transaction()?;
            tx.execute(
                "INSERT OR IGNORE INTO entries (key, value, node, created_at) VALUES (?1, ?2, ?3, ?4)",
                params![key.to_hex(), value, node, created],
            )?;
            let stored: String =
                tx.query_row("SELECT value FROM entries WHERE key = ?1", [key.to_hex()], |r| r.get(0))?;
            tx.commit()?;
            Ok(stored)
        })
    }

    /// Remembers that node `node_fp` consulted `keys`, so exports can carry
    /// exactly the cache entries a node's ancestry needs.
    pub fn record_usage(&self, node_fp: &Fingerprint, keys: &[Fingerprint]) -> Result<()> {
        if keys.is_empty() {
            return Ok(());
        }
        self.with_conn(|c| {
            let tx = c.transaction()?;
            {
                let mut stmt = tx.prepare("INSERT OR IGNORE INTO usage (node, key) VALUES (?1, ?2)")?;
                for k in keys {
                    stmt.execute(params![node_fp.to_hex(), k.to_hex()])?;
                }
            }
            tx.commit()
        })
    }

    pub fn len(&self) -> Result<usize> {
        self.with_conn(|c| c.query_row("SELECT COUNT(*) FROM entries", [], |r| r.get::<_, i64>(0)))
            .map(|n| n as usize)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Every entry, ordered by key.
    pub fn entries(&self) -> Result<Vec<CacheEntry>> {
        let rows = self.with_conn(|c| {
            let mut stmt = c.prepare("SELECT key, value, node, created_at FROM entries ORDER BY key")?;
            let rows = stmt
                .query_map([], |r| {
                    Ok((r.get::<_, String>(0)?, r.get(1)?, r.get(2)?, r.get(3)?))
                })?
                .collect::<rusqlite::Result<Vec<(String, String, Option<String>, String)>>>()?;
            Ok(rows)
        })?;
        rows.into_iter()
            .map(|(k, value, node, created_at)| {
                Ok(CacheEntry {
                    key: k.parse()?,
                    value,
                    node,
                    created_at,
                })
            })
            .collect()
    }

    /// Entries used by any of `nodes`, ordered by key.
    pub fn entries_used_by(&self, nodes: &[Fingerprint]) -> Result<Vec<CacheEntry>> {
        let wanted: BTreeSet<String> = self.with_conn(|c| {
            let mut stmt = c.prepare("SELECT key FROM usage WHERE node = ?1")?;
            let mut keys = BTreeSet::new();
            for n in nodes {
                for k in stmt.query_map([n.to_hex()], |r| r.get::<_, String>(0))? {
                    keys.insert(k?);
                }
            }
            Ok(keys)
        })?;
        Ok(self
            .entries()?
            .into_iter()
            .filter(|e| wanted.contains(&e.key.to_hex()))
            .collect())
    }

    /// Adds entries from another cache (e.g. an exported `cache.jsonl`).
    /// Returns how many keys were new.
    pub fn import(&self, entries: &[(Fingerprint, String)]) -> Result<usize> {
        let created = now_rfc3339();
        self.with_conn(|c| {
            let tx = c.transaction()?;
            let mut added = 0;
            {
                let mut stmt = tx.prepare(
                    "INSERT OR IGNORE INTO entries (key, value, node, created_at) VALUES (?1, ?2, NULL, ?3)",
                )?;
                for (k, v) in entries {
                    added += stmt.execute(params![k.to_hex(), v, created])?;
                }
            }
            tx.commit()?;
            Ok(added)
        })
    }

    pub fn close(&self) {
        self.conn.lock().expect("cache lock poisoned").take();
    }
}

/// One `cache.jsonl` line: `{"key":"<hex>","value":"<text>"}` plus newline.
pub fn cache_jsonl_line(key: &Fingerprint, value: &str) -> Vec<u8> {
    let doc = CanonicalValue::map([
        ("key", CanonicalValue::Text(key.to_hex())),
        ("value", CanonicalValue::Text(value.to_string())),
    ]);
    let mut line = canonical_bytes(&doc).expect("flat map");
    line.push(b'\n');
    line
}

pub fn parse_cache_jsonl(text: &str) -> Result<Vec<(Fingerprint, String)>> {
    #[derive(serde::Deserialize)]
    struct Line {
        key: Fingerprint,
        value: String,
    }
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let line: Line = serde_json::from_str(l).map_err(|e| Error::malformed("cache.jsonl", e))?;
            Ok((line.key, line.value))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_value_wins() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = PromptCache::open(&tmp.path().join("prompts.db")).unwrap();
        let k = Fingerprint::of_bytes(b"k");
        assert_eq!(cache.get(&k).unwrap(), None);
        assert_eq!(cache.insert(&k, "first", None).unwrap(), "first");
        assert_eq!(cache.insert(&k, "second", None).unwrap(), "first");
        assert_eq!(cache.get(&k).unwrap().as_deref(), Some("first"));
        assert_eq!(cache.len().unwrap(), 1);
    }

    #[test]
    fn usage_selects_entries() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = PromptCache::open(&tmp.path().join("prompts.db")).unwrap();
        let keys: Vec<Fingerprint> = (0..4u8).map(|i| Fingerprint::of_bytes(&[i])).collect();
        for k in &keys {
            cache.insert(k, &k.short(4), None).unwrap();
        }
        let a = Fingerprint::of_bytes(b"node-a");
        cache.record_usage(&a, &keys[..2]).unwrap();
        cache.record_usage(&a, &keys[..1]).unwrap();
        let used = cache.entries_used_by(&[a]).unwrap();
        assert_eq!(used.len(), 2);
        assert!(used.windows(2).all(|w| w[0].key < w[1].key));
    }

    #[test]
    fn jsonl_round_trip_and_import() {
        let k = Fingerprint::of_bytes(b"x");
        let line = cache_jsonl_line(&k, "multi\nline \"text\"");
        let text = String::from_utf8(line).unwrap();
        assert!(text.starts_with("{\"key\":\""));
        let parsed = parse_cache_jsonl(&text).unwrap();
        assert_eq!(parsed, vec![(k, "multi\nline \"text\"".to_string())]);

        let tmp = tempfile::tempdir().unwrap();
        let cache = PromptCache::open(&tmp.path().join("prompts.db")).unwrap();
        assert_eq!(cache.import(&parsed).unwrap(), 1);
        assert_eq!(cache.import(&parsed).unwrap(), 0);
    }

    #[test]
    fn closed_cache_reports_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = PromptCache::open(&tmp.path().join("prompts.db")).unwrap();
        cache.close();
        assert!(matches!(cache.get(&Fingerprint::of_bytes(b"")), Err(Error::SessionClosed)));
    }
}
