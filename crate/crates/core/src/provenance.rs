//! Data and model cards built by tracing a node's ancestry through the
//! session folder, plus export of a node as a shareable bundle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::fingerprint::{canonical_bytes, workflow_fingerprint_of, CanonicalValue, Fingerprint, NodeDescriptor};
use crate::fsutil::{copy_dir, write_atomic};
use crate::model::{cache_jsonl_line, parse_cache_jsonl, ModelRef, PromptCache, MODEL_NODE_VERSION};
use crate::session::{NodeFolder, Session, CACHE_DIR, FORMAT_VERSION, PROMPT_CACHE_FILE};
use crate::step::{read_fingerprint_file, StatusFile, CARD_JSON, CARD_MD, DATASET_DIR, FINGERPRINT_FILE};
use crate::trainer::MODEL_DIR;

pub const CARD_SCHEMA_VERSION: u32 = 1;
pub const ARG_ELIDE_LIMIT: usize = 200;
pub const CACHE_EXPORT_FILE: &str = "cache.jsonl";
pub const SYNTHETIC_TAG: &str = "synthetic";

/// A step or trainer folder found in a session.
#[derive(Clone, Debug)]
pub struct NodeInfo {
    pub fingerprint: Fingerprint,
    pub name: String,
    pub folder: NodeFolder,
    pub dir: PathBuf,
    pub node: NodeDescriptor,
    pub status: Option<StatusFile>,
}

impl NodeInfo {
    pub fn is_done(&self) -> bool {
        self.status.as_ref().is_some_and(|s| s.status.is_done())
    }
}

/// Every live (non-backup) node folder of a session, by fingerprint.
#[derive(Debug)]
pub struct SessionIndex {
    pub root: PathBuf,
    nodes: BTreeMap<Fingerprint, NodeInfo>,
}

impl SessionIndex {
    pub fn scan(root: &Path) -> Result<SessionIndex> {
        let mut nodes = BTreeMap::new();
        for folder in [NodeFolder::Steps, NodeFolder::Trainers] {
            let base = root.join(folder.dir_name());
            let mut dirs = match fs::read_dir(&base) {
                Ok(entries) => entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_dir())
                    .collect::<Vec<_>>(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(Error::Io { path: base, source: e }),
            };
            dirs.sort();
            for dir in dirs {
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                if name.contains(".bak-") {
                    continue;
                }
                let Ok((fingerprint, node)) = read_fingerprint_file(&dir) else { continue };
                nodes.entry(fingerprint).or_insert(NodeInfo {
                    fingerprint,
                    name,
                    folder,
                    status: StatusFile::read(&dir).ok(),
                    dir,
                    node,
                });
            }
        }
        Ok(SessionIndex {
            root: root.to_path_buf(),
            nodes,
        })
    }

    pub fn get(&self, fp: &Fingerprint) -> Option<&NodeInfo> {
        self.nodes.get(fp)
    }

    /// Looks a node up by folder name, steps before trainers.
    pub fn by_name(&self, name: &str) -> Option<&NodeInfo> {
        let mut matches: Vec<&NodeInfo> = self.nodes.values().filter(|n| n.name == name).collect();
        matches.sort_by_key(|n| (n.folder != NodeFolder::Steps, n.dir.clone()));
        matches.first().copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeInfo> {
        self.nodes.values()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CardSubject {
    pub kind: String,
    pub name: String,
    pub version: u32,
    pub fingerprint: Fingerprint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CardNode {
    pub kind: String,
    pub name: String,
    pub version: u32,
    pub fingerprint: Fingerprint,
    pub args_summary: CanonicalValue,
    pub license: Option<String>,
    pub citation: Option<String>,
    pub date: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Card {
    pub schema_version: u32,
    pub subject: CardSubject,
    /// Every ancestor including the subject, inputs before consumers.
    pub ancestry: Vec<CardNode>,
    pub tags: Vec<String>,
    pub workflow_fingerprint: Fingerprint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CardFormat {
    Json,
    Markdown,
}

fn opt_text(s: &Option<String>) -> CanonicalValue {
    CanonicalValue::from(s.clone())
}

/// Strings longer than the limit become their prefix, `…`, and their length.
pub fn summarize_args(v: &CanonicalValue) -> CanonicalValue {
    match v {
        CanonicalValue::Text(s) if s.chars().count() > ARG_ELIDE_LIMIT => {
            let prefix: String = s.chars().take(ARG_ELIDE_LIMIT).collect();
            CanonicalValue::Text(format!("{prefix}…{}", s.chars().count()))
        }
        CanonicalValue::List(items) => CanonicalValue::List(items.iter().map(summarize_args).collect()),
        CanonicalValue::Map(m) => CanonicalValue::Map(m.iter().map(|(k, v)| (k.clone(), summarize_args(v))).collect()),
        other => other.clone(),
    }
}

impl Card {
    pub fn to_canonical(&self) -> CanonicalValue {
        let ancestry = self
            .ancestry
            .iter()
            .map(|n| {
                CanonicalValue::map([
                    ("args_summary", n.args_summary.clone()),
                    ("citation", opt_text(&n.citation)),
                    ("date", opt_text(&n.date)),
                    ("fingerprint", CanonicalValue::Text(n.fingerprint.to_hex())),
                    ("kind", CanonicalValue::from(n.kind.as_str())),
                    ("license", opt_text(&n.license)),
                    ("name", CanonicalValue::from(n.name.as_str())),
                    ("version", CanonicalValue::from(n.version)),
                ])
            })
            .collect();
        CanonicalValue::map([
            ("ancestry", CanonicalValue::List(ancestry)),
            ("schema_version", CanonicalValue::from(self.schema_version)),
            (
                "subject",
                CanonicalValue::map([
                    ("fingerprint", CanonicalValue::Text(self.subject.fingerprint.to_hex())),
                    ("kind", CanonicalValue::from(self.subject.kind.as_str())),
                    ("name", CanonicalValue::from(self.subject.name.as_str())),
                    ("version", CanonicalValue::from(self.subject.version)),
                ]),
            ),
            ("tags", CanonicalValue::from(self.tags.clone())),
            ("workflow_fingerprint", CanonicalValue::Text(self.workflow_fingerprint.to_hex())),
        ])
    }

    pub fn render(&self, format: CardFormat) -> Vec<u8> {
        render_card(self, format)
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

pub fn render_card(card: &Card, format: CardFormat) -> Vec<u8> {
    match format {
        CardFormat::Json => {
            let mut out = canonical_bytes(&card.to_canonical()).expect("card depth is bounded");
            out.push(b'\n');
            out
        }
        CardFormat::Markdown => render_markdown(card).into_bytes(),
    }
}

fn render_markdown(card: &Card) -> String {
    use std::fmt::Write;
    let mut md = String::new();
    let s = &card.subject;
    let _ = writeln!(md, "# Card: {}\n", s.name);
    let _ = writeln!(md, "## Subject\n");
    let _ = writeln!(md, "- Kind: {}", s.kind);
    let _ = writeln!(md, "- Name: {}", s.name);
    let _ = writeln!(md, "- Version: {}", s.version);
    let _ = writeln!(md, "- Fingerprint: `{}`\n", s.fingerprint);
    let _ = writeln!(md, "## Tags\n");
    if card.tags.is_empty() {
        let _ = writeln!(md, "None.");
    }
    for t in &card.tags {
        let _ = writeln!(md, "- {t}");
    }
    let _ = writeln!(md, "\n## Lineage\n");
    let _ = writeln!(md, "| # | Kind | Name | Version | Fingerprint | Date |");
    let _ = writeln!(md, "|---|------|------|---------|-------------|------|");
    for (i, n) in card.ancestry.iter().enumerate() {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | `{}` | {} |",
            i + 1,
            md_cell(&n.kind),
            md_cell(&n.name),
            n.version,
            n.fingerprint.short(12),
            n.date.as_deref().unwrap_or("-")
        );
    }
    let _ = writeln!(md, "\n## Licenses\n");
    let licensed: Vec<&CardNode> = card.ancestry.iter().filter(|n| n.license.is_some()).collect();
    if licensed.is_empty() {
        let _ = writeln!(md, "No license information recorded.");
    }
    for n in licensed {
        let _ = writeln!(md, "- {} ({}): {}", n.name, n.kind, n.license.as_deref().unwrap_or_default());
    }
    let _ = writeln!(md, "\n## Citations\n");
    let cited: Vec<&CardNode> = card.ancestry.iter().filter(|n| n.citation.is_some()).collect();
    if cited.is_empty() {
        let _ = writeln!(md, "No citations recorded.");
    }
    for n in cited {
        let _ = writeln!(md, "- {} ({}): {}", n.name, n.kind, n.citation.as_deref().unwrap_or_default());
    }
    let _ = writeln!(md, "\n## Reproducibility\n");
    let _ = writeln!(md, "- Workflow fingerprint: `{}`", card.workflow_fingerprint);
    for n in &card.ancestry {
        let _ = writeln!(md, "- {} `{}`", n.name, n.fingerprint);
    }
    md
}

struct Traced {
    node: CardNode,
    parents: Vec<Fingerprint>,
}

/// Builds the card of the node with fingerprint `fp` in `index`.
pub fn build_card_from(index: &SessionIndex, fp: &Fingerprint) -> Result<Card> {
    let subject = index.get(fp).ok_or(Error::IncompleteAncestry(*fp))?;
    if !subject.is_done() {
        return Err(Error::NotCompleted(subject.name.clone()));
    }

    let mut traced: BTreeMap<Fingerprint, Traced> = BTreeMap::new();
    let mut model_dates: HashMap<Fingerprint, Vec<String>> = HashMap::new();
    let mut stack = vec![*fp];
    while let Some(cur) = stack.pop() {
        if traced.contains_key(&cur) {
            continue;
        }
        let info = index.get(&cur).ok_or(Error::IncompleteAncestry(cur))?;
        let status = info.status.clone();
        let date = status.as_ref().and_then(|s| s.completed_at.clone());
        let mut parents = info.node.inputs.clone();
        for m in status.as_ref().map(|s| s.models.as_slice()).unwrap_or_default() {
            let mfp = m.fingerprint();
            parents.push(mfp);
            if let Some(d) = &date {
                model_dates.entry(mfp).or_default().push(d.clone());
            }
            traced.entry(mfp).or_insert_with(|| model_node(m));
        }
        for input in &info.node.inputs {
            stack.push(*input);
        }
        traced.insert(
            cur,
            Traced {
                node: CardNode {
                    kind: info.node.kind.clone(),
                    name: info.name.clone(),
                    version: info.node.version,
                    fingerprint: cur,
                    args_summary: summarize_args(&CanonicalValue::Map(info.node.args.clone())),
                    license: status.as_ref().and_then(|s| s.license.clone()),
                    citation: status.as_ref().and_then(|s| s.citation.clone()),
                    date,
                },
                parents,
            },
        );
    }
    for (mfp, dates) in model_dates {
        if let Some(t) = traced.get_mut(&mfp) {
            t.node.date = dates.into_iter().min();
        }
    }

    // Kahn's algorithm; among ready nodes the smallest fingerprint goes first.
    let mut pending: HashMap<Fingerprint, usize> = HashMap::new();
    let mut children: HashMap<Fingerprint, Vec<Fingerprint>> = HashMap::new();
    for (fp, t) in &traced {
        let parents: BTreeSet<&Fingerprint> = t.parents.iter().collect();
        pending.insert(*fp, parents.len());
        for p in parents {
            children.entry(*p).or_default().push(*fp);
        }
    }
    let mut ready: BTreeSet<Fingerprint> = pending.iter().filter(|(_, n)| **n == 0).map(|(fp, _)| *fp).collect();
    let mut order = Vec::with_capacity(traced.len());
    while let Some(next) = ready.pop_first() {
        order.push(next);
        for c in children.get(&next).into_iter().flatten() {
            let n = pending.get_mut(c).expect("child is traced");
            *n -= 1;
            if *n == 0 {
                ready.insert(*c);
            }
        }
    }
    let ancestry: Vec<CardNode> = order.into_iter().map(|fp| traced.remove(&fp).expect("traced").node).collect();

    let models: BTreeSet<String> = ancestry
        .iter()
        .filter(|n| n.kind == "model")
        .map(|n| format!("source-model:{}", n.name))
        .collect();
    let mut tags = Vec::new();
    if !models.is_empty() {
        tags.push(SYNTHETIC_TAG.to_string());
        tags.extend(models);
    }
    Ok(Card {
        schema_version: CARD_SCHEMA_VERSION,
        subject: CardSubject {
            kind: subject.node.kind.clone(),
            name: subject.name.clone(),
            version: subject.node.version,
            fingerprint: *fp,
        },
        ancestry,
        tags,
        workflow_fingerprint: workflow_fingerprint_of(FORMAT_VERSION, [(*fp, &[][..])]),
    })
}

fn model_node(m: &ModelRef) -> Traced {
    let d = m.descriptor();
    Traced {
        node: CardNode {
            kind: d.kind.clone(),
            name: m.model_id.clone(),
            version: MODEL_NODE_VERSION,
            fingerprint: m.fingerprint(),
            args_summary: summarize_args(&CanonicalValue::Map(d.args)),
            license: m.license.clone(),
            citation: m.citation.clone(),
            date: None,
        },
        parents: Vec::new(),
    }
}

/// Card of the node with fingerprint `fp` in the session folder `session_dir`.
pub fn build_card(session_dir: &Path, fp: &Fingerprint) -> Result<Card> {
    build_card_from(&SessionIndex::scan(session_dir)?, fp)
}

/// Writes `card.json` and `card.md` into a completed node folder.
pub fn write_cards(session_dir: &Path, node_dir: &Path) -> Result<()> {
    let (fp, _) = read_fingerprint_file(node_dir)?;
    let mut index = SessionIndex::scan(session_dir)?;
    // The folder being written wins over any twin with the same fingerprint.
    if let Some(own) = index.nodes.get_mut(&fp) {
        if own.dir != node_dir {
            own.dir = node_dir.to_path_buf();
            own.name = node_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            own.status = StatusFile::read(node_dir).ok();
        }
    }
    let card = build_card_from(&index, &fp)?;
    write_atomic(&node_dir.join(CARD_JSON), &render_card(&card, CardFormat::Json))?;
    write_atomic(&node_dir.join(CARD_MD), &render_card(&card, CardFormat::Markdown))
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct ExportSummary {
    pub files: Vec<String>,
    pub cache_entries: usize,
}

/// Copies the completed node `name` to `dest`: its dataset or model, its
/// fingerprint and its cards, plus (optionally) the prompt-cache entries
/// its ancestry used, as `cache.jsonl`.
pub fn export(session_dir: &Path, name: &str, dest: &Path, include_caches: bool) -> Result<ExportSummary> {
    let index = SessionIndex::scan(session_dir)?;
    let info = index.by_name(name).ok_or_else(|| Error::UnknownNode(name.to_string()))?;
    if !info.is_done() {
        return Err(Error::NotCompleted(name.to_string()));
    }
    let card = build_card_from(&index, &info.fingerprint)?;
    let payload = match info.folder {
        NodeFolder::Steps => DATASET_DIR,
        NodeFolder::Trainers => MODEL_DIR,
    };
    if !info.dir.join(payload).is_dir() {
        return Err(Error::NotCompleted(name.to_string()));
    }
    let cache_lines = if include_caches {
        let used: Vec<Fingerprint> = card.ancestry.iter().map(|n| n.fingerprint).collect();
        let db = session_dir.join(CACHE_DIR).join(PROMPT_CACHE_FILE);
        match PromptCache::open_read_only(&db)? {
            Some(cache) => cache.entries_used_by(&used)?,
            None => Vec::new(),
        }
    } else {
        Vec::new()
    };

    fs::create_dir_all(dest).at(dest)?;
    copy_dir(&info.dir.join(payload), &dest.join(payload))?;
    fs::copy(info.dir.join(FINGERPRINT_FILE), dest.join(FINGERPRINT_FILE)).at(dest.join(FINGERPRINT_FILE))?;
    write_atomic(&dest.join(CARD_JSON), &render_card(&card, CardFormat::Json))?;
    write_atomic(&dest.join(CARD_MD), &render_card(&card, CardFormat::Markdown))?;
    let mut files = vec![
        format!("{payload}/"),
        FINGERPRINT_FILE.to_string(),
        CARD_JSON.to_string(),
        CARD_MD.to_string(),
    ];
    if include_caches {
        let mut out = Vec::new();
        for e in &cache_lines {
            out.extend(cache_jsonl_line(&e.key, &e.value));
        }
        write_atomic(&dest.join(CACHE_EXPORT_FILE), &out)?;
        files.push(CACHE_EXPORT_FILE.to_string());
    }
    Ok(ExportSummary {
        files,
        cache_entries: cache_lines.len(),
    })
}

/// Loads a `cache.jsonl` into the session's prompt cache so replay mode can
/// serve it. Returns how many keys were new.
pub fn import_cache(session: &Session, jsonl: &Path) -> Result<usize> {
    let text = fs::read_to_string(jsonl).at(jsonl)?;
    session.prompt_cache().import(&parse_cache_jsonl(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_args_are_elided() {
        let long = "x".repeat(250);
        let v = CanonicalValue::map([("a", CanonicalValue::Text(long)), ("b", CanonicalValue::from("short"))]);
        let s = summarize_args(&v);
        let a = s.as_map().unwrap()["a"].as_str().unwrap();
        assert!(a.starts_with(&"x".repeat(200)));
        assert!(a.ends_with("…250"));
        assert_eq!(s.as_map().unwrap()["b"].as_str(), Some("short"));
    }
}
