//! `dreamforge`: inspect and maintain session folders without the program
//! that produced them.
//!
//! Exit codes: 0 success, 1 domain error (including a difference found by
//! `diff`), 2 usage error.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::dataset::{record_json, Dataset};
use crate::error::{Error, IoContext, Result};
use crate::fingerprint::NodeDescriptor;
use crate::model::{cache_jsonl_line, PromptCache};
use crate::provenance::{build_card_from, export, render_card, CardFormat, SessionIndex};
use crate::session::{
    workflow_fingerprint_of_entries, FolderLock, ManifestEntry, NodeFolder, SessionManifest, CACHE_DIR,
    PROMPT_CACHE_FILE, STEPS_DIR, TRAINERS_DIR,
};
use crate::step::{read_fingerprint_file, StatusFile, DATASET_DIR};
use crate::trainer::{scan_checkpoints, CHECKPOINT_DIR, MODEL_DIR, WEIGHTS_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dreamforge", version, about = "Inspect and maintain dreamforge session folders")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// List the nodes of a session, or print rows of one step.
    Inspect {
        #[arg(long)]
        step: Option<String>,
        #[arg(long, default_value_t = 5)]
        rows: usize,
        dir: PathBuf,
    },
    /// Print the workflow fingerprint, or one node's fingerprint.
    Fingerprint {
        #[arg(long)]
        step: Option<String>,
        dir: PathBuf,
    },
    /// Compare two session folders.
    Diff { dir_a: PathBuf, dir_b: PathBuf },
    /// Render a node's card.
    Card {
        #[arg(long)]
        step: String,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        dir: PathBuf,
    },
    /// Write the prompt cache as JSONL to stdout.
    DumpCache { dir: PathBuf },
    /// Remove backups and superseded checkpoints (the default), or the cache.
    Clean {
        #[arg(long)]
        bak: bool,
        #[arg(long)]
        checkpoints: bool,
        #[arg(long)]
        cache: bool,
        dir: PathBuf,
    },
    /// Copy a completed node with its cards to DEST.
    Export {
        #[arg(long)]
        step: String,
        #[arg(long)]
        include_caches: bool,
        dir: PathBuf,
        dest: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Md,
}

/// Outcome of a verb that ran to completion.
enum Done {
    Ok,
    /// Ran fine but found what the verb reports as a failure (a diff).
    Differs,
}

/// Parses `args` (including the program name) and runs the verb.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{rendered}");
                EXIT_OK
            };
        }
    };
    match execute(cli.verb, out) {
        Ok(Done::Ok) => EXIT_OK,
        Ok(Done::Differs) => EXIT_DOMAIN,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NotASession(_)
        | Error::SessionLocked(_)
        | Error::LockHeld(_)
        | Error::UnknownNode(_)
        | Error::IncompatibleFormat { .. } => EXIT_USAGE,
        _ => EXIT_DOMAIN,
    }
}

fn execute(verb: Verb, out: &mut dyn Write) -> Result<Done> {
    match verb {
        Verb::Inspect { step, rows, dir } => inspect(&dir, step.as_deref(), rows, out),
        Verb::Fingerprint { step, dir } => fingerprint(&dir, step.as_deref(), out),
        Verb::Diff { dir_a, dir_b } => diff(&dir_a, &dir_b, out),
        Verb::Card { step, format, dir } => card(&dir, &step, format, out),
        Verb::DumpCache { dir } => dump_cache(&dir, out),
        Verb::Clean {
            bak,
            checkpoints,
            cache,
            dir,
        } => {
            let defaults = !bak && !checkpoints && !cache;
            clean(&dir, bak || defaults, checkpoints || defaults, cache, out)
        }
        Verb::Export {
            step,
            include_caches,
            dir,
            dest,
        } => {
            SessionManifest::read(&dir)?;
            if dest.exists() && fs::read_dir(&dest).at(&dest)?.next().is_some() {
                return Err(Error::InvalidValue(format!("destination {} is not empty", dest.display())));
            }
            let summary = export(&dir, &step, &dest, include_caches)?;
            emit(out, format!("exported {step} to {}", dest.display()))?;
            for f in &summary.files {
                emit(out, format!("  {f}"))?;
            }
            if include_caches {
                emit(out, format!("{} cache entries", summary.cache_entries))?;
            }
            Ok(Done::Ok)
        }
    }
}

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).at("<stdout>")
}

fn entry_dir(dir: &Path, e: &ManifestEntry) -> PathBuf {
    dir.join(e.folder.dir_name()).join(&e.name)
}

fn find_entry(manifest: &SessionManifest, name: &str) -> Result<ManifestEntry> {
    manifest
        .steps
        .iter()
        .find(|e| e.name == name)
        .cloned()
        .ok_or_else(|| Error::UnknownNode(name.to_string()))
}

fn inspect(dir: &Path, step: Option<&str>, rows: usize, out: &mut dyn Write) -> Result<Done> {
    let manifest = SessionManifest::read(dir)?;
    if let Some(name) = step {
        let e = find_entry(&manifest, name)?;
        let node_dir = entry_dir(dir, &e);
        match e.folder {
            NodeFolder::Steps => {
                let ds = Dataset::load(&node_dir.join(DATASET_DIR)).map_err(|_| Error::NotCompleted(name.to_string()))?;
                emit(out, format!("{name}: {} rows, columns {}", ds.len().unwrap_or(0), ds.columns().join(", ")))?;
                for r in ds.iter().take(rows) {
                    emit(out, record_json(ds.columns(), &r?))?;
                }
            }
            NodeFolder::Trainers => {
                let weights = node_dir.join(MODEL_DIR).join(WEIGHTS_FILE);
                if !weights.is_file() {
                    return Err(Error::NotCompleted(name.to_string()));
                }
                let bytes = fs::read(&weights).at(&weights)?;
                emit(out, format!("{name}: trainer artifact {} ({} bytes)", weights.display(), bytes.len()))?;
            }
        }
        return Ok(Done::Ok);
    }

    emit(out, format!("session {}", dir.display()))?;
    emit(
        out,
        format!(
            "format {}  engine {}  created {}",
            manifest.format_version, manifest.engine_version, manifest.created_at
        ),
    )?;
    emit(out, format!("workflow {}", workflow_fingerprint_of_entries(dir, &manifest.steps)))?;
    emit(out, format!("{:<32} {:<22} {:<10} {:<12} {:>8}", "NAME", "KIND", "STATUS", "FINGERPRINT", "ROWS"))?;
    for e in &manifest.steps {
        let node_dir = entry_dir(dir, e);
        let kind = read_fingerprint_file(&node_dir).map(|(_, n)| n.kind).unwrap_or_else(|_| "?".into());
        let rows = StatusFile::read(&node_dir)
            .ok()
            .and_then(|s| s.rows)
            .map(|r| r.to_string())
            .unwrap_or_else(|| "-".into());
        emit(
            out,
            format!("{:<32} {:<22} {:<10} {:<12} {:>8}", e.name, kind, e.status.as_str(), e.fingerprint.short(12), rows),
        )?;
    }
    let n = manifest.steps.len();
    emit(out, format!("{n} {}", if n == 1 { "step" } else { "steps" }))?;
    Ok(Done::Ok)
}

fn fingerprint(dir: &Path, step: Option<&str>, out: &mut dyn Write) -> Result<Done> {
    let manifest = SessionManifest::read(dir)?;
    let Some(name) = step else {
        emit(out, workflow_fingerprint_of_entries(dir, &manifest.steps).to_hex())?;
        return Ok(Done::Ok);
    };
    let e = find_entry(&manifest, name)?;
    let (stored, node) = read_fingerprint_file(&entry_dir(dir, &e))?;
    emit(out, stored.to_hex())?;
    let recomputed = node.fingerprint()?;
    if recomputed != stored || stored != e.fingerprint {
        emit(out, format!("mismatch: descriptor hashes to {recomputed}, manifest records {}", e.fingerprint))?;
        return Ok(Done::Differs);
    }
    Ok(Done::Ok)
}

/// Names of the canonical-node fields that differ between `a` and `b`.
pub fn node_field_diff(a: &NodeDescriptor, b: &NodeDescriptor) -> Vec<String> {
    let mut fields = Vec::new();
    if a.kind != b.kind {
        fields.push("kind".to_string());
    }
    if a.version != b.version {
        fields.push("version".to_string());
    }
    let keys: BTreeSet<&String> = a.args.keys().chain(b.args.keys()).collect();
    for k in keys {
        if a.args.get(k) != b.args.get(k) {
            fields.push(format!("args.{k}"));
        }
    }
    if a.inputs != b.inputs {
        fields.push("inputs".to_string());
    }
    fields
}

fn descriptor_of(dir: &Path, e: &ManifestEntry) -> Option<NodeDescriptor> {
    read_fingerprint_file(&entry_dir(dir, e)).ok().map(|(_, n)| n)
}

fn diff(a: &Path, b: &Path, out: &mut dyn Write) -> Result<Done> {
    let ma = SessionManifest::read(a)?;
    let mb = SessionManifest::read(b)?;
    let wa = workflow_fingerprint_of_entries(a, &ma.steps);
    let wb = workflow_fingerprint_of_entries(b, &mb.steps);
    let same_nodes = ma.steps.len() == mb.steps.len()
        && ma
            .steps
            .iter()
            .zip(&mb.steps)
            .all(|(x, y)| x.name == y.name && x.fingerprint == y.fingerprint && x.status.is_done() == y.status.is_done());
    if wa == wb && same_nodes {
        emit(out, format!("identical (workflow {wa})"))?;
        return Ok(Done::Ok);
    }
    emit(out, format!("workflow fingerprints: {} vs {}", wa.short(12), wb.short(12)))?;

    let mut first = true;
    for (x, y) in ma.steps.iter().zip(&mb.steps) {
        if x.fingerprint == y.fingerprint && x.name == y.name {
            if x.status.is_done() != y.status.is_done() {
                emit(out, format!("step {}: status {} vs {}", x.name, x.status, y.status))?;
            }
            continue;
        }
        let label = if x.name == y.name {
            x.name.clone()
        } else {
            format!("{} / {}", x.name, y.name)
        };
        let fields = match (descriptor_of(a, x), descriptor_of(b, y)) {
            (Some(na), Some(nb)) => node_field_diff(&na, &nb),
            _ => vec!["descriptor unavailable".to_string()],
        };
        let mut fields = fields;
        if x.name != y.name {
            fields.insert(0, "name".to_string());
        }
        let head = if first { "first divergence at step" } else { "also differs: step" };
        first = false;
        emit(
            out,
            format!(
                "{head} {label} ({} vs {}): {}",
                x.fingerprint.short(12),
                y.fingerprint.short(12),
                if fields.is_empty() { "no field differences".to_string() } else { fields.join(", ") }
            ),
        )?;
    }
    let common = ma.steps.len().min(mb.steps.len());
    for (side, m) in [("a", &ma), ("b", &mb)] {
        if m.steps.len() > common {
            let extra: Vec<&str> = m.steps[common..].iter().map(|e| e.name.as_str()).collect();
            emit(out, format!("extra steps in {side}: {}", extra.join(", ")))?;
        }
    }
    Ok(Done::Differs)
}

fn card(dir: &Path, name: &str, format: Format, out: &mut dyn Write) -> Result<Done> {
    let manifest = SessionManifest::read(dir)?;
    let e = find_entry(&manifest, name)?;
    let index = SessionIndex::scan(dir)?;
    let card = build_card_from(&index, &e.fingerprint)?;
    let fmt = match format {
        Format::Json => CardFormat::Json,
        Format::Md => CardFormat::Markdown,
    };
    out.write_all(&render_card(&card, fmt)).at("<stdout>")?;
    Ok(Done::Ok)
}

fn dump_cache(dir: &Path, out: &mut dyn Write) -> Result<Done> {
    SessionManifest::read(dir)?;
    let Some(cache) = PromptCache::open_read_only(&dir.join(CACHE_DIR).join(PROMPT_CACHE_FILE))? else {
        return Ok(Done::Ok);
    };
    for e in cache.entries()? {
        out.write_all(&cache_jsonl_line(&e.key, &e.value)).at("<stdout>")?;
    }
    Ok(Done::Ok)
}

fn remove(path: &Path, removed: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path).at(path)?;
    } else {
        fs::remove_file(path).at(path)?;
    }
    removed.push(path.to_path_buf());
    Ok(())
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = match fs::read_dir(dir) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect::<Vec<_>>(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::Io { path: dir.to_path_buf(), source: e }),
    };
    dirs.sort();
    Ok(dirs)
}

fn clean(dir: &Path, bak: bool, checkpoints: bool, cache: bool, out: &mut dyn Write) -> Result<Done> {
    let _lock = FolderLock::acquire(dir)?;
    let mut removed = Vec::new();
    if bak {
        for top in [STEPS_DIR, TRAINERS_DIR] {
            for d in subdirs(&dir.join(top))? {
                if d.file_name().is_some_and(|n| n.to_string_lossy().contains(".bak-")) {
                    remove(&d, &mut removed)?;
                }
            }
        }
    }
    if checkpoints {
        for d in subdirs(&dir.join(TRAINERS_DIR))? {
            if d.file_name().is_some_and(|n| n.to_string_lossy().contains(".bak-")) {
                continue;
            }
            // Keep the newest readable checkpoint; everything older is superseded.
            let mut kept = false;
            for (path, parsed) in scan_checkpoints(&d.join(CHECKPOINT_DIR))? {
                if !kept && parsed.is_ok() {
                    kept = true;
                    continue;
                }
                remove(&path, &mut removed)?;
            }
        }
    }
    if cache {
        let db = dir.join(CACHE_DIR).join(PROMPT_CACHE_FILE);
        for suffix in ["", "-journal", "-wal", "-shm"] {
            let p = PathBuf::from(format!("{}{suffix}", db.display()));
            if p.exists() {
                remove(&p, &mut removed)?;
            }
        }
    }
    if removed.is_empty() {
        emit(out, "nothing to remove")?;
    }
    for p in &removed {
        emit(out, format!("removed {}", p.strip_prefix(dir).unwrap_or(p).display()))?;
    }
    Ok(Done::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_str(&["dreamforge"]).0, EXIT_USAGE);
        assert_eq!(run_str(&["dreamforge", "frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_str(&["dreamforge", "card", "/tmp"]).0, EXIT_USAGE);
    }

    #[test]
    fn not_a_session_exits_two() {
        let d = tempfile::tempdir().unwrap();
        let (code, _, err) = run_str(&["dreamforge", "inspect", d.path().to_str().unwrap()]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("not a session"), "{err}");
    }

    #[test]
    fn help_goes_to_stdout() {
        let (code, out, _) = run_str(&["dreamforge", "--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("inspect"));
    }
}
