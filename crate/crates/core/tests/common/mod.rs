#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use dreamforge::dataset::record;
use dreamforge::model::MockProvider;
use dreamforge::{Dataset, LogLevel, ProviderRegistry, Session, SessionOptions};
use sha2::{Digest, Sha256};

/// Options that swallow log output.
pub fn quiet() -> SessionOptions {
    SessionOptions {
        log_level: LogLevel::Error,
        log_sink: Some(Arc::new(|_: &str| {})),
        ..SessionOptions::default()
    }
}

/// Options whose `mock` provider is `mock`.
pub fn with_mock(mock: Arc<MockProvider>) -> SessionOptions {
    let providers = ProviderRegistry::with_defaults();
    providers.register("mock", mock);
    SessionOptions { providers, ..quiet() }
}

/// Options that collect log lines into the returned buffer.
pub fn capturing() -> (SessionOptions, Arc<Mutex<Vec<String>>>) {
    let lines = Arc::new(Mutex::new(Vec::new()));
    let sink = lines.clone();
    let opts = SessionOptions {
        log_level: LogLevel::Debug,
        log_sink: Some(Arc::new(move |l: &str| sink.lock().unwrap().push(l.to_string()))),
        ..SessionOptions::default()
    };
    (opts, lines)
}

pub fn open(dir: &Path) -> Session {
    Session::open_with(dir, quiet()).expect("open session")
}

pub fn texts(words: &[&str]) -> Dataset {
    Dataset::from_rows(["text"], words.iter().map(|w| record([("text", *w)])).collect()).unwrap()
}

pub const WA: [&str; 5] = ["alpha", "beta", "gamma", "delta", "epsilon"];
pub const WB: [&str; 7] = ["red", "green", "blue", "yellow", "purple", "orange", "black"];

/// The fixed 200-row classification set with a pinned trained-weights hash.
pub fn fixed200() -> Dataset {
    let rows = (0..200usize)
        .map(|i| {
            let text = format!(
                "item{} {} {} {}",
                i % 13,
                WA[i % 5],
                WB[(i * 3) % 7],
                if i % 2 == 0 { "good" } else { "bad" }
            );
            let label = if i % 2 == 0 { "positive" } else { "negative" };
            record([("text", text), ("label", label.to_string())])
        })
        .collect();
    Dataset::from_rows(["text", "label"], rows).unwrap()
}

pub const FIXED200_WEIGHTS_SHA: &str = "64a425add9fb43bf68826aa51c56ca836c5b6c06b54c144257e799ddb6715e60";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Every file under `dir` with the SHA-256 of its bytes.
pub fn tree_hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), "<dir>".into());
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), sha256_hex(&fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn copy_tree(src: &Path, dest: &Path) {
    fs::create_dir_all(dest).unwrap();
    for e in fs::read_dir(src).unwrap() {
        let e = e.unwrap();
        let to = dest.join(e.file_name());
        if e.path().is_dir() {
            copy_tree(&e.path(), &to);
        } else {
            fs::copy(e.path(), to).unwrap();
        }
    }
}
