//! Session lifecycle: folder skeleton, lock, manifest, step-name registry,
//! logging, and the shared prompt cache.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, IoContext, Result};
use crate::fingerprint::{workflow_fingerprint_of, Fingerprint, NodeDescriptor};
use crate::fsutil::{now_rfc3339, write_atomic};
use crate::model::{Mode, ModelClient, PromptCache, ProviderRegistry};
use crate::trainer::TrainerRegistry;

/// Folder layout version written by this engine.
pub const FORMAT_VERSION: u32 = 1;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = ".dreamforge.json";
pub const LOCK_FILE: &str = ".lock";
pub const CACHE_DIR: &str = "cache";
pub const PROMPT_CACHE_FILE: &str = "prompts.db";
pub const STEPS_DIR: &str = "steps";
pub const TRAINERS_DIR: &str = "trainers";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum LogLevel {
    Debug,
    #[default]
    Info,
    Warn,
    Error,
}

impl LogLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            LogLevel::Debug => "DEBUG",
            LogLevel::Info => "INFO",
            LogLevel::Warn => "WARN",
            LogLevel::Error => "ERROR",
        }
    }
}

impl std::str::FromStr for LogLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "debug" => Ok(LogLevel::Debug),
            "info" => Ok(LogLevel::Info),
            "warn" => Ok(LogLevel::Warn),
            "error" => Ok(LogLevel::Error),
            _ => Err(Error::InvalidValue(format!("unknown log level `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Running,
    Cached,
    Completed,
    Failed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pending => "pending",
            Status::Running => "running",
            Status::Cached => "cached",
            Status::Completed => "completed",
            Status::Failed => "failed",
        }
    }

    /// Completed in this run or loaded from a previous one.
    pub fn is_done(self) -> bool {
        matches!(self, Status::Completed | Status::Cached)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which top-level folder a node lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeFolder {
    Steps,
    Trainers,
}

impl NodeFolder {
    pub fn dir_name(self) -> &'static str {
        match self {
            NodeFolder::Steps => STEPS_DIR,
            NodeFolder::Trainers => TRAINERS_DIR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub fingerprint: Fingerprint,
    pub folder: NodeFolder,
    pub name: String,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub created_at: String,
    pub engine_version: String,
    pub format_version: u32,
    pub steps: Vec<ManifestEntry>,
}

impl SessionManifest {
    pub fn new() -> Self {
        SessionManifest {
            created_at: now_rfc3339(),
            engine_version: ENGINE_VERSION.into(),
            format_version: FORMAT_VERSION,
            steps: Vec::new(),
        }
    }

    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn to_bytes(&self) -> Vec<u8> {
        // Going through `Value` sorts object keys.
        let value = serde_json::to_value(self).expect("manifest serializes");
        let mut out = serde_json::to_vec_pretty(&value).expect("manifest serializes");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| Error::malformed(MANIFEST_FILE, e))?;
        // Check the version before the rest so newer layouts fail cleanly.
        if let Some(v) = value.get("format_version").and_then(|v| v.as_u64()) {
            if v > u64::from(FORMAT_VERSION) {
                return Err(Error::IncompatibleFormat {
                    found: v.min(u64::from(u32::MAX)) as u32,
                    supported: FORMAT_VERSION,
                });
            }
        }
        serde_json::from_value(value).map_err(|e| Error::malformed(MANIFEST_FILE, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        match fs::read(&path) {
            Ok(bytes) => Self::from_bytes(&bytes),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(Error::NotASession(dir.to_path_buf())),
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }
}

impl Default for SessionManifest {
    fn default() -> Self {
        Self::new()
    }
}

/// Lowercase; runs of characters other than ASCII letters and digits become
/// a single `-`; leading and trailing dashes are trimmed.
pub fn normalize_name(name: &str) -> Result<String> {
    let mut out = String::with_capacity(name.len());
    let mut dash = false;
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            if dash && !out.is_empty() {
                out.push('-');
            }
            dash = false;
            out.push(ch.to_ascii_lowercase());
        } else {
            dash = true;
        }
    }
    if out.is_empty() {
        Err(Error::EmptyName)
    } else {
        Ok(out)
    }
}

pub type LogSink = Arc<dyn Fn(&str) + Send + Sync>;

#[derive(Clone)]
pub struct SessionOptions {
    pub log_level: LogLevel,
    pub mode: Mode,
    pub providers: ProviderRegistry,
    pub trainers: TrainerRegistry,
    /// Rows between progress checkpoints of record-wise steps.
    pub progress_interval: usize,
    /// Concurrent provider calls per record-wise step.
    pub in_flight: usize,
    /// Receives each formatted log line instead of stderr.
    pub log_sink: Option<LogSink>,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            log_level: LogLevel::Info,
            mode: Mode::Live,
            providers: ProviderRegistry::with_defaults(),
            trainers: TrainerRegistry::with_defaults(),
            progress_interval: 100,
            in_flight: 8,
            log_sink: None,
        }
    }
}

impl fmt::Debug for SessionOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionOptions")
            .field("log_level", &self.log_level)
            .field("mode", &self.mode)
            .field("providers", &self.providers.names())
            .field("progress_interval", &self.progress_interval)
            .field("in_flight", &self.in_flight)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
struct RegistryEntry {
    entry: ManifestEntry,
    /// Registered during this run, as opposed to loaded from the manifest.
    claimed: bool,
}

struct State {
    created_at: String,
    entries: Vec<RegistryEntry>,
    /// Names held for background jobs, by job id.
    reserved: HashMap<String, u64>,
    closed: bool,
}

thread_local! {
    static CURRENT_JOB: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn with_job<T>(job: u64, f: impl FnOnce() -> T) -> T {
    CURRENT_JOB.with(|c| c.set(Some(job)));
    let out = f();
    CURRENT_JOB.with(|c| c.set(None));
    out
}

struct Inner {
    dir: PathBuf,
    options: SessionOptions,
    lock_token: String,
    state: Mutex<State>,
    cache: Arc<PromptCache>,
    client: ModelClient,
    executions: Mutex<BTreeMap<String, u64>>,
    next_job: AtomicU64,
}

/// A live session. Cheap to share across threads by reference; background
/// jobs hold their own handle to the same state.
pub struct Session {
    inner: Arc<Inner>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session").field("dir", &self.inner.dir).finish_non_exhaustive()
    }
}

impl Session {
    pub fn open(dir: impl AsRef<Path>, log_level: LogLevel) -> Result<Session> {
        Self::open_with(
            dir,
            SessionOptions {
                log_level,
                ..SessionOptions::default()
            },
        )
    }

    pub fn open_with(dir: impl AsRef<Path>, options: SessionOptions) -> Result<Session> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).at(&dir)?;
        // Refuse newer layouts before touching anything.
        let manifest = match SessionManifest::read(&dir) {
            Ok(m) => Some(m),
            Err(Error::NotASession(_)) => None,
            Err(e) => return Err(e),
        };
        let logger = Logger {
            level: options.log_level,
            sink: options.log_sink.clone(),
        };
        let lock_token = acquire_lock(&dir, &logger)?;
        let opened = (|| {
            for sub in [CACHE_DIR, STEPS_DIR, TRAINERS_DIR] {
                fs::create_dir_all(dir.join(sub)).at(dir.join(sub))?;
            }
            let cache = Arc::new(PromptCache::open(&dir.join(CACHE_DIR).join(PROMPT_CACHE_FILE))?);
            Ok::<_, Error>(cache)
        })();
        let cache = match opened {
            Ok(c) => c,
            Err(e) => {
                release_lock(&dir, &lock_token);
                return Err(e);
            }
        };
        let manifest = manifest.unwrap_or_default();
        let mut entries = Vec::new();
        for mut e in manifest.steps {
            if !dir.join(e.folder.dir_name()).join(&e.name).is_dir() {
                logger.emit(LogLevel::Warn, None, &format!("manifest lists `{}` but its folder is missing; dropping it", e.name));
                continue;
            }
            if e.status.is_done() {
                e.status = Status::Cached;
            }
            entries.push(RegistryEntry { entry: e, claimed: false });
        }
        let client = ModelClient::new(options.providers.clone(), cache.clone(), options.mode);
        let session = Session {
            inner: Arc::new(Inner {
                dir,
                options,
                lock_token,
                state: Mutex::new(State {
                    created_at: manifest.created_at,
                    entries,
                    reserved: HashMap::new(),
                    closed: false,
                }),
                cache,
                client,
                executions: Mutex::new(BTreeMap::new()),
                next_job: AtomicU64::new(1),
            }),
        };
        session.flush_manifest()?;
        session.log(LogLevel::Debug, None, &format!("opened session at {}", session.dir().display()));
        Ok(session)
    }

    pub(crate) fn share(&self) -> Session {
        Session {
            inner: self.inner.clone(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.inner.dir
    }

    pub fn options(&self) -> &SessionOptions {
        &self.inner.options
    }

    pub fn mode(&self) -> Mode {
        self.inner.options.mode
    }

    pub fn log_level(&self) -> LogLevel {
        self.inner.options.log_level
    }

    pub fn client(&self) -> &ModelClient {
        &self.inner.client
    }

    pub fn prompt_cache(&self) -> &PromptCache {
        &self.inner.cache
    }

    pub fn providers(&self) -> &ProviderRegistry {
        &self.inner.options.providers
    }

    pub fn trainers(&self) -> &TrainerRegistry {
        &self.inner.options.trainers
    }

    pub fn progress_interval(&self) -> usize {
        self.inner.options.progress_interval.max(1)
    }

    pub fn in_flight(&self) -> usize {
        self.inner.options.in_flight.max(1)
    }

    pub fn node_dir(&self, folder: NodeFolder, name: &str) -> PathBuf {
        self.inner.dir.join(folder.dir_name()).join(name)
    }

    pub fn is_closed(&self) -> bool {
        self.inner.state.lock().expect("session state poisoned").closed
    }

    pub(crate) fn ensure_open(&self) -> Result<()> {
        if self.is_closed() {
            Err(Error::SessionClosed)
        } else {
            Ok(())
        }
    }

    pub fn log(&self, level: LogLevel, step: Option<&str>, message: &str) {
        Logger {
            level: self.inner.options.log_level,
            sink: self.inner.options.log_sink.clone(),
        }
        .emit(level, step, message);
    }

    /// Claims a name for a node about to run with `fingerprint`.
    ///
    /// Re-registering the same name and fingerprint returns the same name.
    /// A name already claimed in this run by a different fingerprint gets
    /// the lowest free `-2`, `-3`, ... suffix. Names left over from a
    /// previous run are simply claimed.
    pub fn register_step(&self, name: &str, fingerprint: &Fingerprint, folder: NodeFolder) -> Result<String> {
        let base = normalize_name(name)?;
        let job = CURRENT_JOB.with(|c| c.get());
        let mut state = self.inner.state.lock().expect("session state poisoned");
        if state.closed {
            return Err(Error::SessionClosed);
        }
        let mut k = 1u32;
        loop {
            let candidate = if k == 1 { base.clone() } else { format!("{base}-{k}") };
            k += 1;
            if let Some(&owner) = state.reserved.get(&candidate) {
                if Some(owner) != job {
                    continue;
                }
            }
            match state.entries.iter_mut().find(|e| e.entry.name == candidate) {
                None => {
                    state.entries.push(RegistryEntry {
                        entry: ManifestEntry {
                            fingerprint: *fingerprint,
                            folder,
                            name: candidate.clone(),
                            status: Status::Pending,
                        },
                        claimed: true,
                    });
                    return Ok(candidate);
                }
                Some(e) if e.claimed => {
                    if e.entry.fingerprint == *fingerprint && e.entry.folder == folder {
                        return Ok(candidate);
                    }
                }
                Some(e) => {
                    if e.entry.folder != folder {
                        continue;
                    }
                    e.claimed = true;
                    if e.entry.fingerprint != *fingerprint {
                        e.entry.fingerprint = *fingerprint;
                        e.entry.status = Status::Pending;
                    }
                    return Ok(candidate);
                }
            }
        }
    }

    pub(crate) fn set_status(&self, name: &str, fingerprint: &Fingerprint, status: Status) -> Result<()> {
        {
            let mut state = self.inner.state.lock().expect("session state poisoned");
            if let Some(e) = state.entries.iter_mut().find(|e| e.entry.name == name) {
                e.entry.fingerprint = *fingerprint;
                e.entry.status = status;
            }
        }
        self.flush_manifest()
    }

    /// Reserves names for a background job. Fails if any is claimed in this
    /// run, reserved by another job, or repeated.
    pub(crate) fn reserve_names(&self, names: &[String]) -> Result<u64> {
        let mut state = self.inner.state.lock().expect("session state poisoned");
        if state.closed {
            return Err(Error::SessionClosed);
        }
        let mut seen = std::collections::HashSet::new();
        for n in names {
            let taken = state.reserved.contains_key(n)
                || state.entries.iter().any(|e| e.claimed && e.entry.name == *n)
                || !seen.insert(n.clone());
            if taken {
                return Err(Error::NameConflict(n.clone()));
            }
        }
        let job = self.inner.next_job.fetch_add(1, Ordering::SeqCst);
        for n in names {
            state.reserved.insert(n.clone(), job);
        }
        Ok(job)
    }

    pub(crate) fn release_names(&self, job: u64) {
        let mut state = self.inner.state.lock().expect("session state poisoned");
        state.reserved.retain(|_, owner| *owner != job);
    }

    /// Manifest entries in registration order.
    pub fn steps(&self) -> Vec<ManifestEntry> {
        let state = self.inner.state.lock().expect("session state poisoned");
        state.entries.iter().map(|e| e.entry.clone()).collect()
    }

    pub fn entry(&self, name: &str) -> Option<ManifestEntry> {
        let state = self.inner.state.lock().expect("session state poisoned");
        state.entries.iter().find(|e| e.entry.name == name).map(|e| e.entry.clone())
    }

    pub(crate) fn count_execution(&self, name: &str) {
        *self.inner.executions.lock().expect("poisoned").entry(name.to_string()).or_default() += 1;
    }

    /// How many times node `name` actually executed (cache hits excluded).
    pub fn executions(&self, name: &str) -> u64 {
        self.inner.executions.lock().expect("poisoned").get(name).copied().unwrap_or(0)
    }

    pub fn total_executions(&self) -> u64 {
        self.inner.executions.lock().expect("poisoned").values().sum()
    }

    pub fn manifest(&self) -> SessionManifest {
        let state = self.inner.state.lock().expect("session state poisoned");
        self.manifest_of(&state)
    }

    fn manifest_of(&self, state: &State) -> SessionManifest {
        let steps = state
            .entries
            .iter()
            .filter(|e| self.node_dir(e.entry.folder, &e.entry.name).is_dir())
            .map(|e| e.entry.clone())
            .collect();
        SessionManifest {
            created_at: state.created_at.clone(),
            engine_version: ENGINE_VERSION.into(),
            format_version: FORMAT_VERSION,
            steps,
        }
    }

    pub(crate) fn flush_manifest(&self) -> Result<()> {
        let state = self.inner.state.lock().expect("session state poisoned");
        if state.closed {
            return Err(Error::SessionClosed);
        }
        let bytes = self.manifest_of(&state).to_bytes();
        write_atomic(&self.inner.dir.join(MANIFEST_FILE), &bytes)
    }

    /// Fingerprint over the session's completed terminal nodes.
    pub fn workflow_fingerprint(&self) -> Fingerprint {
        let entries = self.steps();
        workflow_fingerprint_of_entries(&self.inner.dir, &entries)
    }

    /// Flushes the manifest, closes the prompt cache and releases the lock.
    /// Closing twice is a no-op.
    pub fn close(&self) -> Result<()> {
        let mut state = self.inner.state.lock().expect("session state poisoned");
        if state.closed {
            return Ok(());
        }
        let bytes = self.manifest_of(&state).to_bytes();
        let written = write_atomic(&self.inner.dir.join(MANIFEST_FILE), &bytes);
        state.closed = true;
        self.inner.cache.close();
        release_lock(&self.inner.dir, &self.inner.lock_token);
        written
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        let state = self.state.get_mut().expect("session state poisoned");
        if state.closed {
            return;
        }
        state.closed = true;
        self.cache.close();
        release_lock(&self.dir, &self.lock_token);
    }
}

/// Workflow fingerprint from manifest entries, reading each node's inputs
/// from its `fingerprint.json`. Entries that are not done are ignored.
pub fn workflow_fingerprint_of_entries(dir: &Path, entries: &[ManifestEntry]) -> Fingerprint {
    let nodes: Vec<(Fingerprint, Vec<Fingerprint>)> = entries
        .iter()
        .filter(|e| e.status.is_done())
        .map(|e| {
            let path = dir.join(e.folder.dir_name()).join(&e.name).join(crate::step::FINGERPRINT_FILE);
            let inputs = fs::read_to_string(path)
                .ok()
                .and_then(|t| NodeDescriptor::parse_fingerprint_file(&t).ok())
                .map(|(_, node)| node.inputs)
                .unwrap_or_default();
            (e.fingerprint, inputs)
        })
        .collect();
    workflow_fingerprint_of(FORMAT_VERSION, nodes.iter().map(|(fp, i)| (*fp, i.as_slice())))
}

#[derive(Clone)]
pub(crate) struct Logger {
    pub level: LogLevel,
    pub sink: Option<LogSink>,
}

impl Logger {
    pub fn emit(&self, level: LogLevel, step: Option<&str>, message: &str) {
        if level < self.level {
            return;
        }
        let line = format!("{} {} [{}] {}", now_rfc3339(), level.as_str(), step.unwrap_or("session"), message);
        match &self.sink {
            Some(sink) => sink(&line),
            None => eprintln!("{line}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LockInfo {
    pid: u32,
    started_at: String,
    token: String,
}

fn pid_alive(pid: u32) -> bool {
    let Ok(pid) = libc::pid_t::try_from(pid) else { return false };
    if pid <= 0 {
        return false;
    }
    // SAFETY: signal 0 only checks for existence and permission.
    let rc = unsafe { libc::kill(pid, 0) };
    rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

fn acquire_lock(dir: &Path, logger: &Logger) -> Result<String> {
    let lock = dir.join(LOCK_FILE);
    let token = format!(
        "{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or_default()
    );
    let info = LockInfo {
        pid: std::process::id(),
        started_at: now_rfc3339(),
        token: token.clone(),
    };
    let tmp = dir.join(format!("{LOCK_FILE}.{token}"));
    {
        let mut f = OpenOptions::new().write(true).create_new(true).open(&tmp).at(&tmp)?;
        f.write_all(json!(info).to_string().as_bytes()).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    let result = (|| {
        for _ in 0..8 {
            match fs::hard_link(&tmp, &lock) {
                Ok(()) => return Ok(()),
                Err(e) if e.kind() == ErrorKind::AlreadyExists => {}
                Err(e) => return Err(Error::Io { path: lock.clone(), source: e }),
            }
            let holder: Option<LockInfo> = fs::read(&lock).ok().and_then(|b| serde_json::from_slice(&b).ok());
            match holder {
                Some(h) if pid_alive(h.pid) => return Err(Error::LockHeld(dir.to_path_buf())),
                // A half-written lock from a racing opener: treat as held.
                None if fs::metadata(&lock).map(|m| m.len() == 0).unwrap_or(false) => {
                    return Err(Error::LockHeld(dir.to_path_buf()))
                }
                holder => {
                    let pid = holder.map(|h| h.pid.to_string()).unwrap_or_else(|| "?".into());
                    logger.emit(LogLevel::Warn, None, &format!("stealing stale lock held by dead process {pid}"));
                    let grave = dir.join(format!("{LOCK_FILE}.stale-{token}"));
                    if fs::rename(&lock, &grave).is_ok() {
                        let _ = fs::remove_file(&grave);
                    }
                }
            }
        }
        Err(Error::LockHeld(dir.to_path_buf()))
    })();
    let _ = fs::remove_file(&tmp);
    result.map(|()| token)
}

fn release_lock(dir: &Path, token: &str) {
    let lock = dir.join(LOCK_FILE);
    let ours = fs::read(&lock)
        .ok()
        .and_then(|b| serde_json::from_slice::<LockInfo>(&b).ok())
        .is_some_and(|h| h.token == token);
    if ours {
        let _ = fs::remove_file(&lock);
    }
}

/// The session lock held without opening a session, for maintenance
/// tools. Released on drop.
pub struct FolderLock {
    dir: PathBuf,
    token: String,
}

impl FolderLock {
    /// Fails with `SessionLocked` when a live process holds the folder.
    pub fn acquire(dir: &Path) -> Result<FolderLock> {
        SessionManifest::read(dir)?;
        let logger = Logger {
            level: LogLevel::Warn,
            sink: None,
        };
        match acquire_lock(dir, &logger) {
            Ok(token) => Ok(FolderLock {
                dir: dir.to_path_buf(),
                token,
            }),
            Err(Error::LockHeld(d)) => Err(Error::SessionLocked(d)),
            Err(e) => Err(e),
        }
    }
}

impl Drop for FolderLock {
    fn drop(&mut self) {
        release_lock(&self.dir, &self.token);
    }
}

/// Whether a live process holds the lock on `dir`.
pub fn is_locked(dir: &Path) -> bool {
    fs::read(dir.join(LOCK_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<LockInfo>(&b).ok())
        .is_some_and(|h| pid_alive(h.pid))
}
