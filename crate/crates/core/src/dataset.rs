//! Named-column tables backing every step's input and output.
//!
//! On disk a dataset is a folder holding `schema.json` (columns, row count,
//! content hash) and `data.jsonl` (one JSON object per row, keys in schema
//! order, `\n`-terminated). The content hash covers the schema and the rows in
//! canonical form, so it does not depend on whether the rows live in memory,
//! on disk, or behind a lazy iterator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::fingerprint::{canonical_bytes, write_json_string, CanonicalValue, Fingerprint};
use crate::fsutil::write_atomic;
use crate::rng::shuffle_in_place;

pub const SCHEMA_FILE: &str = "schema.json";
pub const DATA_FILE: &str = "data.jsonl";
pub const MAX_VALUE_DEPTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Text(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    Null,
    List(Vec<Value>),
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Plain-text rendering used when a value is substituted into a prompt
    /// or used as a label.
    pub fn render(&self) -> String {
        match self {
            Value::Text(s) => s.clone(),
            Value::Int(i) => i.to_string(),
            Value::Float(f) => format!("{f:?}"),
            Value::Bool(b) => b.to_string(),
            Value::Null => String::new(),
            Value::List(_) => {
                let mut out = Vec::new();
                write_value_json(&mut out, self);
                String::from_utf8(out).expect("json is UTF-8")
            }
        }
    }

    pub fn to_canonical(&self) -> CanonicalValue {
        match self {
            Value::Text(s) => CanonicalValue::Text(s.clone()),
            Value::Int(i) => CanonicalValue::Int(*i),
            Value::Float(f) => CanonicalValue::Float(*f),
            Value::Bool(b) => CanonicalValue::Bool(*b),
            Value::Null => CanonicalValue::Null,
            Value::List(items) => CanonicalValue::List(items.iter().map(Value::to_canonical).collect()),
        }
    }

    fn validate(&self, depth: usize) -> Result<()> {
        match self {
            Value::Float(f) if !f.is_finite() => Err(Error::InvalidValue(format!("non-finite float {f}"))),
            Value::List(items) => {
                if depth >= MAX_VALUE_DEPTH {
                    return Err(Error::InvalidValue(format!("list nesting exceeds {MAX_VALUE_DEPTH}")));
                }
                items.iter().try_for_each(|v| v.validate(depth + 1))
            }
            _ => Ok(()),
        }
    }

    fn from_json(json: serde_json::Value) -> Result<Self> {
        Ok(match json {
            serde_json::Value::Null => Value::Null,
            serde_json::Value::Bool(b) => Value::Bool(b),
            serde_json::Value::String(s) => Value::Text(s),
            serde_json::Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Value::Int(i)
                } else if n.is_u64() {
                    return Err(Error::InvalidValue(format!("integer {n} out of i64 range")));
                } else {
                    Value::Float(n.as_f64().expect("non-integer JSON numbers are f64"))
                }
            }
            serde_json::Value::Array(items) => {
                Value::List(items.into_iter().map(Value::from_json).collect::<Result<_>>()?)
            }
            serde_json::Value::Object(_) => {
                return Err(Error::InvalidValue("nested objects are not supported".into()))
            }
        })
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<f64> for Value {
    fn from(f: f64) -> Self {
        Value::Float(f)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl<T: Into<Value>> From<Vec<T>> for Value {
    fn from(v: Vec<T>) -> Self {
        Value::List(v.into_iter().map(Into::into).collect())
    }
}

pub type Record = BTreeMap<String, Value>;

/// Builds a record from `(column, value)` pairs.
pub fn record<K: Into<String>, V: Into<Value>>(pairs: impl IntoIterator<Item = (K, V)>) -> Record {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

fn write_value_json(out: &mut Vec<u8>, v: &Value) {
    match v {
        Value::Text(s) => write_json_string(out, s),
        Value::Int(i) => out.extend_from_slice(i.to_string().as_bytes()),
        // Debug formatting is the shortest representation that round-trips,
        // and always carries a '.' or exponent so it re-parses as a float.
        Value::Float(f) => out.extend_from_slice(format!("{f:?}").as_bytes()),
        Value::Bool(b) => out.extend_from_slice(if *b { b"true" } else { b"false" }),
        Value::Null => out.extend_from_slice(b"null"),
        Value::List(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value_json(out, item);
            }
            out.push(b']');
        }
    }
}

fn write_record_line(out: &mut Vec<u8>, columns: &[String], r: &Record) {
    out.push(b'{');
    for (i, c) in columns.iter().enumerate() {
        if i > 0 {
            out.push(b',');
        }
        write_json_string(out, c);
        out.push(b':');
        write_value_json(out, &r[c]);
    }
    out.extend_from_slice(b"}\n");
}

/// One row as a JSON object line (no trailing newline), columns in order.
pub fn record_json(columns: &[String], r: &Record) -> String {
    let mut out = Vec::new();
    write_record_line(&mut out, columns, r);
    out.pop();
    String::from_utf8(out).expect("json is UTF-8")
}

fn parse_record_line(columns: &[String], line: &str) -> Result<Record> {
    let json: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::malformed("data.jsonl row", e))?;
    let serde_json::Value::Object(obj) = json else {
        return Err(Error::malformed("data.jsonl row", "not a JSON object"));
    };
    let mut rec = Record::new();
    for (k, v) in obj {
        rec.insert(k, Value::from_json(v)?);
    }
    check_record(columns, &rec)?;
    Ok(rec)
}

fn validate_columns(columns: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for c in columns {
        if c.is_empty() {
            return Err(Error::SchemaMismatch("empty column name".into()));
        }
        if !seen.insert(c) {
            return Err(Error::SchemaMismatch(format!("duplicate column `{c}`")));
        }
    }
    Ok(())
}

fn check_record(columns: &[String], r: &Record) -> Result<()> {
    if r.len() != columns.len() || !columns.iter().all(|c| r.contains_key(c)) {
        let got: Vec<&String> = r.keys().collect();
        return Err(Error::SchemaMismatch(format!("record has columns {got:?}, expected {columns:?}")));
    }
    r.values().try_for_each(|v| v.validate(0))
}

/// Streams the canonical form `{"columns":[..],"rows":[[..],..]}` into SHA-256.
struct ContentHasher {
    sha: Sha256,
    rows: usize,
}

impl ContentHasher {
    fn new(columns: &[String]) -> Self {
        let mut sha = Sha256::new();
        sha.update(b"{\"columns\":");
        let cols = CanonicalValue::List(columns.iter().map(|c| CanonicalValue::Text(c.clone())).collect());
        sha.update(canonical_bytes(&cols).expect("column list is shallow"));
        sha.update(b",\"rows\":[");
        ContentHasher { sha, rows: 0 }
    }

    fn push(&mut self, columns: &[String], r: &Record) {
        if self.rows > 0 {
            self.sha.update(b",");
        }
        let row = CanonicalValue::List(columns.iter().map(|c| r[c].to_canonical()).collect());
        // Values were validated, so depth and finiteness hold.
        self.sha.update(canonical_bytes(&row).expect("validated row"));
        self.rows += 1;
    }

    fn finish(mut self) -> Fingerprint {
        self.sha.update(b"]}");
        Fingerprint::from_bytes(self.sha.finalize().into())
    }
}

pub type RowIter = Box<dyn Iterator<Item = Result<Record>> + Send>;
type LazySource = Arc<dyn Fn() -> RowIter + Send + Sync>;

#[derive(Clone)]
enum Storage {
    Memory { rows: Arc<Vec<Record>>, hash: Fingerprint },
    Disk { dir: PathBuf, len: usize, hash: Fingerprint },
    Lazy(LazySource),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StorageKind {
    Memory,
    Disk(PathBuf),
    Lazy,
}

/// An immutable table. Cloning is cheap.
#[derive(Clone)]
pub struct Dataset {
    columns: Arc<[String]>,
    storage: Storage,
}

impl fmt::Debug for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dataset")
            .field("columns", &self.columns)
            .field("storage", &self.storage_kind())
            .field("len", &self.len())
            .field("content_hash", &self.content_hash())
            .finish()
    }
}

impl Dataset {
    pub fn from_rows<C: Into<String>>(columns: impl IntoIterator<Item = C>, rows: Vec<Record>) -> Result<Self> {
        let columns: Vec<String> = columns.into_iter().map(Into::into).collect();
        validate_columns(&columns)?;
        let mut hasher = ContentHasher::new(&columns);
        for r in &rows {
            check_record(&columns, r)?;
            hasher.push(&columns, r);
        }
        Ok(Dataset {
            columns: columns.into(),
            storage: Storage::Memory {
                rows: Arc::new(rows),
                hash: hasher.finish(),
            },
        })
    }

    /// A dataset whose rows are produced on demand by `source`. Each call of
    /// `source` must yield the same rows.
    pub fn lazy<C, F, I>(columns: impl IntoIterator<Item = C>, source: F) -> Result<Self>
    where
        C: Into<String>,
        F: Fn() -> I + Send + Sync + 'static,
        I: Iterator<Item = Record> + Send + 'static,
    {
        let columns: Vec<String> = columns.into_iter().map(Into::into).collect();
        validate_columns(&columns)?;
        let columns: Arc<[String]> = columns.into();
        let cols = columns.clone();
        let source: LazySource = Arc::new(move || {
            let cols = cols.clone();
            Box::new(source().map(move |r| check_record(&cols, &r).map(|_| r)))
        });
        Ok(Dataset {
            columns,
            storage: Storage::Lazy(source),
        })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    /// Row count; `None` for lazy datasets.
    pub fn len(&self) -> Option<usize> {
        match &self.storage {
            Storage::Memory { rows, .. } => Some(rows.len()),
            Storage::Disk { len, .. } => Some(*len),
            Storage::Lazy(_) => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    /// Content hash; `None` for lazy datasets until materialized.
    pub fn content_hash(&self) -> Option<Fingerprint> {
        match &self.storage {
            Storage::Memory { hash, .. } | Storage::Disk { hash, .. } => Some(*hash),
            Storage::Lazy(_) => None,
        }
    }

    /// Content hash, streaming over lazy rows if needed.
    pub fn compute_content_hash(&self) -> Result<Fingerprint> {
        if let Some(h) = self.content_hash() {
            return Ok(h);
        }
        let mut hasher = ContentHasher::new(&self.columns);
        for r in self.iter() {
            hasher.push(&self.columns, &r?);
        }
        Ok(hasher.finish())
    }

    pub fn storage_kind(&self) -> StorageKind {
        match &self.storage {
            Storage::Memory { .. } => StorageKind::Memory,
            Storage::Disk { dir, .. } => StorageKind::Disk(dir.clone()),
            Storage::Lazy(_) => StorageKind::Lazy,
        }
    }

    pub fn is_lazy(&self) -> bool {
        matches!(self.storage, Storage::Lazy(_))
    }

    pub fn iter(&self) -> RowIter {
        match &self.storage {
            Storage::Memory { rows, .. } => {
                let rows = rows.clone();
                Box::new((0..rows.len()).map(move |i| Ok(rows[i].clone())))
            }
            Storage::Disk { dir, .. } => match JsonlRows::open(dir, self.columns.clone()) {
                Ok(it) => Box::new(it),
                Err(e) => Box::new(std::iter::once(Err(e))),
            },
            Storage::Lazy(source) => source(),
        }
    }

    pub fn rows(&self) -> Result<Vec<Record>> {
        self.iter().collect()
    }

    /// An in-memory copy of this dataset.
    pub fn materialize(&self) -> Result<Dataset> {
        if let Storage::Memory { .. } = self.storage {
            return Ok(self.clone());
        }
        Dataset::from_rows(self.columns.iter().cloned(), self.rows()?)
    }

    /// Applies `f` to every row. In-memory inputs are mapped eagerly;
    /// disk-backed and lazy inputs produce a lazy result that streams.
    pub fn map<F>(&self, f: F, out_columns: &[&str]) -> Result<Dataset>
    where
        F: Fn(&Record) -> Record + Send + Sync + 'static,
    {
        let out: Vec<String> = out_columns.iter().map(|c| c.to_string()).collect();
        validate_columns(&out)?;
        match &self.storage {
            Storage::Memory { rows, .. } => Dataset::from_rows(out, rows.iter().map(&f).collect()),
            _ => {
                let input = self.clone();
                let f = Arc::new(f);
                Dataset::lazy_fallible(out, move || {
                    let f = f.clone();
                    Box::new(input.iter().map(move |r| r.map(|r| f(&r))))
                })
            }
        }
    }

    /// Keeps the rows for which `p` holds, in their original order.
    pub fn filter<P>(&self, p: P) -> Result<Dataset>
    where
        P: Fn(&Record) -> bool + Send + Sync + 'static,
    {
        match &self.storage {
            Storage::Memory { rows, .. } => {
                Dataset::from_rows(self.columns.iter().cloned(), rows.iter().filter(|r| p(r)).cloned().collect())
            }
            _ => {
                let input = self.clone();
                let p = Arc::new(p);
                Dataset::lazy_fallible(self.columns.to_vec(), move || {
                    let p = p.clone();
                    Box::new(input.iter().filter(move |r| r.as_ref().map_or(true, |r| p(r))))
                })
            }
        }
    }

    /// Deterministic permutation: Fisher–Yates driven by splitmix64(seed).
    pub fn shuffle(&self, seed: u64) -> Result<Dataset> {
        let mut rows = self.rows()?;
        shuffle_in_place(&mut rows, seed);
        Dataset::from_rows(self.columns.iter().cloned(), rows)
    }

    /// Rows of every dataset in argument order.
    pub fn concat(datasets: &[Dataset]) -> Result<Dataset> {
        let first = datasets.first().ok_or(Error::EmptySchema)?;
        for d in &datasets[1..] {
            if d.columns != first.columns {
                return Err(Error::SchemaMismatch(format!(
                    "cannot concatenate columns {:?} with {:?}",
                    first.columns, d.columns
                )));
            }
        }
        let all_memory = datasets.iter().all(|d| matches!(d.storage, Storage::Memory { .. }));
        if all_memory {
            let mut rows = Vec::new();
            for d in datasets {
                rows.extend(d.rows()?);
            }
            return Dataset::from_rows(first.columns.iter().cloned(), rows);
        }
        let parts: Vec<Dataset> = datasets.to_vec();
        Dataset::lazy_fallible(first.columns.to_vec(), move || {
            let parts = parts.clone();
            Box::new(parts.into_iter().flat_map(|d| d.iter()))
        })
    }

    fn lazy_fallible<F>(columns: Vec<String>, source: F) -> Result<Dataset>
    where
        F: Fn() -> RowIter + Send + Sync + 'static,
    {
        validate_columns(&columns)?;
        let columns: Arc<[String]> = columns.into();
        let cols = columns.clone();
        let source: LazySource = Arc::new(move || {
            let cols = cols.clone();
            Box::new(source().map(move |r| r.and_then(|r| check_record(&cols, &r).map(|_| r))))
        });
        Ok(Dataset {
            columns,
            storage: Storage::Lazy(source),
        })
    }

    /// Writes `schema.json` and `data.jsonl` into `dir`, streaming rows.
    pub fn save(&self, dir: &Path) -> Result<Dataset> {
        if let Storage::Disk { dir: own, .. } = &self.storage {
            if same_path(own, dir) {
                return Ok(self.clone());
            }
        }
        let mut writer = DatasetWriter::create(dir, &self.columns)?;
        for r in self.iter() {
            writer.write(&r?)?;
        }
        writer.finish()
    }

    /// Opens a saved dataset, verifying every row against the stored hash.
    /// The result is disk-backed.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let schema = SchemaFile::read(dir)?;
        validate_columns(&schema.columns)?;
        let columns: Arc<[String]> = schema.columns.clone().into();
        let data_path = dir.join(DATA_FILE);
        let corrupt = |found: String| Error::HashMismatch {
            path: data_path.clone(),
            expected: schema.content_hash.to_hex(),
            found,
        };
        let mut hasher = ContentHasher::new(&columns);
        let mut count = 0usize;
        for r in JsonlRows::open(dir, columns.clone())? {
            match r {
                Ok(r) => hasher.push(&columns, &r),
                Err(Error::Io { source, path }) => return Err(Error::Io { source, path }),
                Err(e) => return Err(corrupt(format!("unreadable row {count}: {e}"))),
            }
            count += 1;
        }
        let hash = hasher.finish();
        if hash != schema.content_hash {
            return Err(corrupt(hash.to_hex()));
        }
        if count != schema.row_count {
            return Err(corrupt(format!("{count} rows, schema says {}", schema.row_count)));
        }
        Ok(Dataset {
            columns,
            storage: Storage::Disk {
                dir: dir.to_path_buf(),
                len: count,
                hash,
            },
        })
    }
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    columns: Vec<String>,
    content_hash: Fingerprint,
    row_count: usize,
}

impl SchemaFile {
    fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SCHEMA_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::malformed("schema.json", e))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("schema serializes");
        bytes.push(b'\n');
        write_atomic(&dir.join(SCHEMA_FILE), &bytes)
    }
}

struct JsonlRows {
    columns: Arc<[String]>,
    reader: BufReader<File>,
    path: PathBuf,
    line: String,
    done: bool,
}

impl JsonlRows {
    fn open(dir: &Path, columns: Arc<[String]>) -> Result<Self> {
        let path = dir.join(DATA_FILE);
        let file = File::open(&path).at(&path)?;
        Ok(JsonlRows {
            columns,
            reader: BufReader::new(file),
            path,
            line: String::new(),
            done: false,
        })
    }
}

impl Iterator for JsonlRows {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Result<Record>> {
        if self.done {
            return None;
        }
        self.line.clear();
        match self.reader.read_line(&mut self.line) {
            Ok(0) => {
                self.done = true;
                None
            }
            Ok(_) => {
                if !self.line.ends_with('\n') {
                    self.done = true;
                    return Some(Err(Error::malformed("data.jsonl", "truncated final row")));
                }
                Some(parse_record_line(&self.columns, &self.line[..self.line.len() - 1]))
            }
            Err(e) => {
                self.done = true;
                let err = if e.kind() == std::io::ErrorKind::InvalidData {
                    Error::malformed("data.jsonl", e)
                } else {
                    Error::Io {
                        path: self.path.clone(),
                        source: e,
                    }
                };
                Some(Err(err))
            }
        }
    }
}

/// Streams rows into a dataset folder, hashing as it goes.
pub struct DatasetWriter {
    dir: PathBuf,
    columns: Arc<[String]>,
    out: BufWriter<File>,
    hasher: ContentHasher,
    rows: usize,
    line: Vec<u8>,
}

impl DatasetWriter {
    pub fn create(dir: &Path, columns: &[String]) -> Result<Self> {
        validate_columns(columns)?;
        fs::create_dir_all(dir).at(dir)?;
        remove_if_exists(&dir.join(SCHEMA_FILE))?;
        let path = dir.join(DATA_FILE);
        let file = File::create(&path).at(&path)?;
        Ok(DatasetWriter {
            dir: dir.to_path_buf(),
            columns: columns.to_vec().into(),
            out: BufWriter::new(file),
            hasher: ContentHasher::new(columns),
            rows: 0,
            line: Vec::new(),
        })
    }

    /// Reopens a partially written `data.jsonl`, keeping its first `keep`
    /// rows and discarding anything after them.
    pub fn resume(dir: &Path, columns: &[String], keep: usize) -> Result<Self> {
        validate_columns(columns)?;
        remove_if_exists(&dir.join(SCHEMA_FILE))?;
        let path = dir.join(DATA_FILE);
        let cols: Arc<[String]> = columns.to_vec().into();
        let mut hasher = ContentHasher::new(columns);
        let mut offset = 0u64;
        {
            let mut reader = BufReader::new(File::open(&path).at(&path)?);
            let mut line = String::new();
            for i in 0..keep {
                line.clear();
                let n = reader.read_line(&mut line).at(&path)?;
                if n == 0 || !line.ends_with('\n') {
                    return Err(Error::malformed(
                        "partial data.jsonl",
                        format!("expected {keep} committed rows, found {i}"),
                    ));
                }
                let r = parse_record_line(&cols, &line[..line.len() - 1])?;
                hasher.push(&cols, &r);
                offset += n as u64;
            }
        }
        let mut file = OpenOptions::new().write(true).open(&path).at(&path)?;
        file.set_len(offset).at(&path)?;
        file.seek(SeekFrom::End(0)).at(&path)?;
        Ok(DatasetWriter {
            dir: dir.to_path_buf(),
            columns: cols,
            out: BufWriter::new(file),
            hasher,
            rows: keep,
            line: Vec::new(),
        })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows_written(&self) -> usize {
        self.rows
    }

    pub fn write(&mut self, r: &Record) -> Result<()> {
        check_record(&self.columns, r)?;
        self.hasher.push(&self.columns, r);
        self.line.clear();
        write_record_line(&mut self.line, &self.columns, r);
        let path = self.dir.join(DATA_FILE);
        self.out.write_all(&self.line).at(&path)?;
        self.rows += 1;
        Ok(())
    }

    /// Makes every row written so far durable.
    pub fn flush(&mut self) -> Result<()> {
        let path = self.dir.join(DATA_FILE);
        self.out.flush().at(&path)?;
        self.out.get_ref().sync_data().at(&path)
    }

    pub fn finish(mut self) -> Result<Dataset> {
        self.flush()?;
        let hash = self.hasher.finish();
        SchemaFile {
            columns: self.columns.to_vec(),
            content_hash: hash,
            row_count: self.rows,
        }
        .write(&self.dir)?;
        Ok(Dataset {
            columns: self.columns,
            storage: Storage::Disk {
                dir: self.dir,
                len: self.rows,
                hash,
            },
        })
    }
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}
