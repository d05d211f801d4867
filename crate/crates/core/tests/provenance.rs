mod common;

use std::collections::BTreeSet;
use std::fs;
use std::sync::Arc;

use common::{open, texts, with_mock};
use dreamforge::model::MockProvider;
use dreamforge::provenance::{build_card, export, import_cache, render_card, CardFormat, SYNTHETIC_TAG};
use dreamforge::step::{concat_step, data_source, map_step, process_with_prompt, shuffle_step};
use dreamforge::trainer::train_toy;
use dreamforge::{
    Error, GenerationConfig, Mode, ModelRef, PromptTemplate, ProviderRegistry, Session, SessionOptions, Status,
    ToyHyperparams,
};

fn summarize(s: &Session, name: &str, input: &dreamforge::StepRecord, model: &ModelRef) -> dreamforge::StepRecord {
    process_with_prompt(
        s,
        name,
        model,
        &PromptTemplate::new("Summarize: {{text}}"),
        input,
        &GenerationConfig::default(),
        "summary",
    )
    .unwrap()
}

#[test]
fn leaf_card() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["a"])).unwrap();
    let card = build_card(s.dir(), &src.fingerprint).unwrap();
    assert_eq!(card.ancestry.len(), 1);
    assert_eq!(card.ancestry[0].fingerprint, src.fingerprint);
    assert_eq!(card.ancestry[0].kind, "data-source");
    assert!(card.tags.is_empty());
    assert_eq!(card.subject.name, "src");
}

#[test]
fn model_card_traces_through_the_prompting_step() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["good one", "bad one"])).unwrap();
    let model = ModelRef::mock("mock-model-1");
    let labeled = summarize(&s, "labeled", &src, &model);
    let clf = train_toy(&s, "clf", &labeled, "text", "summary", &ToyHyperparams::default()).unwrap();
    let card = build_card(s.dir(), &clf.fingerprint).unwrap();

    assert_eq!(card.ancestry.len(), 4);
    let kinds: BTreeSet<&str> = card.ancestry.iter().map(|n| n.kind.as_str()).collect();
    assert_eq!(
        kinds,
        BTreeSet::from(["data-source", "model", "process-with-prompt", "toy-text-classifier"])
    );
    assert_eq!(card.ancestry.last().unwrap().fingerprint, clf.fingerprint);
    let pos = |fp| card.ancestry.iter().position(|n| n.fingerprint == fp).unwrap();
    assert!(pos(src.fingerprint) < pos(labeled.fingerprint));
    assert!(pos(model.fingerprint()) < pos(labeled.fingerprint));
    assert_eq!(card.tags, [SYNTHETIC_TAG, "source-model:mock-model-1"]);
    let model_node = &card.ancestry[pos(model.fingerprint())];
    assert_eq!(model_node.name, "mock-model-1");
    assert!(model_node.date.is_some());
}

#[test]
fn diamond_lists_the_shared_ancestor_once() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let a = data_source(&s, "a", texts(&["x", "y"])).unwrap();
    let b = shuffle_step(&s, "b", &a, 1).unwrap();
    let c = map_step(&s, "c", &a, |r| r.clone(), &["text"], Some("copy")).unwrap();
    let d = concat_step(&s, "d", &[&b, &c]).unwrap();
    let card = build_card(s.dir(), &d.fingerprint).unwrap();
    let fps: Vec<_> = card.ancestry.iter().map(|n| n.fingerprint).collect();
    assert_eq!(fps.len(), 4);
    assert_eq!(fps.iter().filter(|f| **f == a.fingerprint).count(), 1);
    assert_eq!(fps[0], a.fingerprint);
    assert_eq!(fps[3], d.fingerprint);
}

#[test]
fn rendering() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["a"])).unwrap();
    let model = ModelRef::mock("mock-model-1")
        .with_citation("X et al. 2023")
        .with_license("CC-BY-4.0");
    let out = summarize(&s, "out", &src, &model);
    let card = build_card(s.dir(), &out.fingerprint).unwrap();

    assert_eq!(render_card(&card, CardFormat::Json), render_card(&card, CardFormat::Json));
    assert_eq!(fs::read(out.dir.join("card.json")).unwrap(), render_card(&card, CardFormat::Json));

    let md = String::from_utf8(render_card(&card, CardFormat::Markdown)).unwrap();
    let table_rows = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| #")).count();
    assert_eq!(table_rows, card.ancestry.len());
    let citations = md.split("## Citations").nth(1).unwrap().split("## ").next().unwrap();
    assert!(citations.contains("X et al. 2023"));
    let licenses = md.split("## Licenses").nth(1).unwrap().split("## ").next().unwrap();
    assert!(licenses.contains("CC-BY-4.0"));
}

#[test]
fn long_prompts_are_elided_in_cards() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["a"])).unwrap();
    let template = format!("{} {{{{text}}}}", "long ".repeat(100));
    let out = process_with_prompt(
        &s,
        "p",
        &ModelRef::mock("m"),
        &PromptTemplate::new(template.clone()),
        &src,
        &GenerationConfig::default(),
        "o",
    )
    .unwrap();
    let card = build_card(s.dir(), &out.fingerprint).unwrap();
    let node = card.ancestry.iter().find(|n| n.fingerprint == out.fingerprint).unwrap();
    let shown = node.args_summary.as_map().unwrap()["template"].as_str().unwrap().to_string();
    assert!(shown.ends_with(&format!("…{}", template.chars().count())));
    assert!(shown.chars().count() < template.chars().count());
}

#[test]
fn missing_ancestor_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let a = data_source(&s, "a", texts(&["x"])).unwrap();
    let b = shuffle_step(&s, "b", &a, 1).unwrap();
    fs::remove_dir_all(&a.dir).unwrap();
    assert!(matches!(build_card(s.dir(), &b.fingerprint), Err(Error::IncompleteAncestry(fp)) if fp == a.fingerprint));
}

#[test]
fn export_bundle_layout() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["a"])).unwrap();
    let dest = tempfile::tempdir().unwrap();
    let out = dest.path().join("bundle");
    export(s.dir(), &src.name, &out, false).unwrap();
    let names: BTreeSet<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, BTreeSet::from(["dataset", "fingerprint.json", "card.json", "card.md"].map(String::from)));
    assert!(out.join("dataset/data.jsonl").is_file());
}

#[test]
fn export_with_caches_and_replay_elsewhere() {
    let dir = tempfile::tempdir().unwrap();
    let words = ["one", "two", "three", "four", "five"];
    let model = ModelRef::mock("mock-model-1");
    let hash = {
        let s = open(dir.path());
        let src = data_source(&s, "src", texts(&words)).unwrap();
        let out = summarize(&s, "out", &src, &model);
        out.dataset().unwrap().compute_content_hash().unwrap()
    };
    let dest = tempfile::tempdir().unwrap();
    let bundle = dest.path().join("bundle");
    let summary = export(dir.path(), "out", &bundle, true).unwrap();
    assert_eq!(summary.cache_entries, 5);
    let jsonl = fs::read_to_string(bundle.join("cache.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 5);

    let fresh = tempfile::tempdir().unwrap();
    let providers = ProviderRegistry::with_defaults();
    providers.disable_transport();
    let s = Session::open_with(
        fresh.path(),
        SessionOptions {
            mode: Mode::Replay,
            providers: providers.clone(),
            ..common::quiet()
        },
    )
    .unwrap();
    assert_eq!(import_cache(&s, &bundle.join("cache.jsonl")).unwrap(), 5);
    let src = data_source(&s, "src", texts(&words)).unwrap();
    let out = summarize(&s, "out", &src, &model);
    assert_eq!(out.dataset().unwrap().compute_content_hash().unwrap(), hash);
    assert_eq!(providers.transport_calls(), 0);
}

#[test]
fn exporting_an_incomplete_step_leaves_dest_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let s = Session::open_with(dir.path(), with_mock(Arc::new(MockProvider::new().failing_after(1)))).unwrap();
    let src = data_source(&s, "src", texts(&["a", "b", "c"])).unwrap();
    let err = process_with_prompt(
        &s,
        "broken",
        &ModelRef::mock("m"),
        &PromptTemplate::new("{{text}}"),
        &src,
        &GenerationConfig::default(),
        "o",
    )
    .unwrap_err();
    assert!(matches!(err, Error::StepFailed { .. }));
    assert_eq!(s.entry("broken").unwrap().status, Status::Failed);

    let dest = tempfile::tempdir().unwrap();
    let target = dest.path().join("bundle");
    assert!(matches!(export(s.dir(), "broken", &target, true), Err(Error::NotCompleted(_))));
    assert!(!target.exists());
    assert!(matches!(export(s.dir(), "nope", &target, true), Err(Error::UnknownNode(_))));
}
