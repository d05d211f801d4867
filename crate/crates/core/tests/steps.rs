mod common;

use std::fs;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{open, quiet, texts, with_mock};
use dreamforge::dataset::{record, Value};
use dreamforge::model::MockProvider;
use dreamforge::step::{
    concat_step, data_source, few_shot_prompt, filter_step, generate_from_prompt, map_step, process_with_prompt,
    run_in_background, shuffle_step, DeferredStep, FewShot, GENERATION_COLUMN,
};
use dreamforge::{Dataset, Error, GenerationConfig, ModelRef, PromptTemplate, Session, Status};

fn mock_model() -> ModelRef {
    ModelRef::mock("mock-model-1")
}

fn column(ds: &Dataset, col: &str) -> Vec<String> {
    ds.rows().unwrap().iter().map(|r| r[col].render()).collect()
}

#[test]
fn identical_rerun_is_served_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let first = {
        let s = open(dir.path());
        let src = data_source(&s, "source", texts(&["a", "b", "c"])).unwrap();
        let out = process_with_prompt(
            &s,
            "summaries",
            &mock_model(),
            &PromptTemplate::new("Summarize: {{text}}"),
            &src,
            &GenerationConfig::default(),
            "summary",
        )
        .unwrap();
        assert_eq!(out.status, Status::Completed);
        assert_eq!(s.total_executions(), 2);
        out.dataset().unwrap().compute_content_hash().unwrap()
    };
    let s = open(dir.path());
    assert!(s.steps().iter().all(|e| e.status == Status::Cached));
    let src = data_source(&s, "source", texts(&["a", "b", "c"])).unwrap();
    let out = process_with_prompt(
        &s,
        "summaries",
        &mock_model(),
        &PromptTemplate::new("Summarize: {{text}}"),
        &src,
        &GenerationConfig::default(),
        "summary",
    )
    .unwrap();
    assert_eq!(out.status, Status::Cached);
    assert_eq!(s.total_executions(), 0);
    assert_eq!(s.providers().transport_calls(), 0);
    assert_eq!(out.dataset().unwrap().compute_content_hash().unwrap(), first);
}

#[test]
fn reopened_session_lists_prior_steps_as_cached() {
    let dir = tempfile::tempdir().unwrap();
    {
        let s = open(dir.path());
        let a = data_source(&s, "a", texts(&["x"])).unwrap();
        let b = shuffle_step(&s, "b", &a, 1).unwrap();
        shuffle_step(&s, "c", &b, 2).unwrap();
        s.close().unwrap();
    }
    let s = open(dir.path());
    let steps = s.steps();
    assert_eq!(steps.iter().map(|e| e.name.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    assert!(steps.iter().all(|e| e.status == Status::Cached));
}

#[test]
fn changed_args_back_up_the_old_folder() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "source", texts(&["a", "b"])).unwrap();
    let v1 = map_step(&s, "upper", &src, |r| r.clone(), &["text"], Some("v1")).unwrap();
    drop(s);
    let s = open(dir.path());
    let src = data_source(&s, "source", texts(&["a", "b"])).unwrap();
    let v2 = map_step(&s, "upper", &src, |r| r.clone(), &["text"], Some("v2")).unwrap();
    assert_ne!(v1.fingerprint, v2.fingerprint);
    assert_eq!(s.executions("upper"), 1);
    assert_eq!(s.executions("source"), 0);
    let bak = dir.path().join("steps").join(format!("upper.bak-{}", &v1.fingerprint.to_hex()[..8]));
    assert!(bak.join("fingerprint.json").is_file(), "missing {}", bak.display());
    assert!(dir.path().join("steps/upper/dataset").is_dir());
}

#[test]
fn chain_change_recomputes_only_the_suffix() {
    let dir = tempfile::tempdir().unwrap();
    let run = |b_key: &str| {
        let s = open(dir.path());
        let a = data_source(&s, "a", texts(&["p", "q"])).unwrap();
        let b = map_step(&s, "b", &a, |r| r.clone(), &["text"], Some(b_key)).unwrap();
        shuffle_step(&s, "c", &b, 3).unwrap();
        (s.executions("a"), s.executions("b"), s.executions("c"))
    };
    assert_eq!(run("one"), (1, 1, 1));
    assert_eq!(run("one"), (0, 0, 0));
    assert_eq!(run("two"), (0, 1, 1));
}

#[test]
fn data_source_is_content_addressed() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let a = data_source(&s, "src", texts(&["a", "b"])).unwrap();
    drop(s);
    let s = open(dir.path());
    let again = data_source(&s, "src", texts(&["a", "b"])).unwrap();
    assert_eq!(again.status, Status::Cached);
    let edited = data_source(&s, "src", texts(&["a", "c"])).unwrap();
    assert_ne!(edited.fingerprint, a.fingerprint);
    assert_eq!(edited.status, Status::Completed);
    let empty = data_source(&s, "empty", texts(&[])).unwrap();
    assert_eq!(empty.dataset().unwrap().len(), Some(0));
}

#[test]
fn prompting_matches_pinned_mock_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&common::WA)).unwrap();
    let out = process_with_prompt(
        &s,
        "p",
        &mock_model(),
        &PromptTemplate::new("Summarize: {{text}}"),
        &src,
        &GenerationConfig::default(),
        "summary",
    )
    .unwrap();
    assert_eq!(
        column(out.dataset().unwrap(), "summary"),
        [
            "MOCK:1d8f4c52958d1ff4",
            "MOCK:1d2331a60aa7d5f6",
            "MOCK:ef70f86f1c13be0a",
            "MOCK:a08882cdb224fcb2",
            "MOCK:ec6d1c4f9bc878ee"
        ]
    );
    assert_eq!(out.dataset().unwrap().columns(), ["text", "summary"]);
}

#[test]
fn prompting_an_empty_input_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&[])).unwrap();
    let out = process_with_prompt(
        &s,
        "p",
        &mock_model(),
        &PromptTemplate::new("{{text}}"),
        &src,
        &GenerationConfig::default(),
        "out",
    )
    .unwrap();
    assert_eq!(out.dataset().unwrap().len(), Some(0));
    assert_eq!(s.providers().transport_calls(), 0);
}

#[test]
fn unknown_placeholder_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["a"])).unwrap();
    let err = process_with_prompt(
        &s,
        "p",
        &mock_model(),
        &PromptTemplate::new("{{missing}}"),
        &src,
        &GenerationConfig::default(),
        "out",
    )
    .unwrap_err();
    assert!(matches!(err, Error::InvalidTemplate(_)), "{err}");
    assert_eq!(s.providers().transport_calls(), 0);
}

#[test]
fn interrupted_prompting_resumes_with_only_the_missing_calls() {
    let template = PromptTemplate::new("Summarize: {{text}}");
    let words: Vec<String> = (0..5).map(|i| format!("w{i}")).collect();
    let words: Vec<&str> = words.iter().map(String::as_str).collect();

    let reference = {
        let dir = tempfile::tempdir().unwrap();
        let s = open(dir.path());
        let src = data_source(&s, "src", texts(&words)).unwrap();
        let out = process_with_prompt(&s, "p", &mock_model(), &template, &src, &GenerationConfig::default(), "o").unwrap();
        out.dataset().unwrap().compute_content_hash().unwrap()
    };

    let dir = tempfile::tempdir().unwrap();
    {
        let mut opts = with_mock(Arc::new(MockProvider::new().failing_after(2)));
        opts.in_flight = 1;
        opts.progress_interval = 1;
        let s = Session::open_with(dir.path(), opts).unwrap();
        let src = data_source(&s, "src", texts(&words)).unwrap();
        let err = process_with_prompt(&s, "p", &mock_model(), &template, &src, &GenerationConfig::default(), "o")
            .unwrap_err();
        assert!(matches!(err, Error::StepFailed { .. }), "{err}");
        assert_eq!(s.entry("p").unwrap().status, Status::Failed);
    }
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&words)).unwrap();
    let out = process_with_prompt(&s, "p", &mock_model(), &template, &src, &GenerationConfig::default(), "o").unwrap();
    assert_eq!(s.providers().transport_calls(), 3);
    assert_eq!(out.dataset().unwrap().compute_content_hash().unwrap(), reference);
    assert!(!out.dir.join("progress.json").exists());
}

#[test]
fn few_shot_prompting() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["5"])).unwrap();
    let fs = FewShot {
        input_column: "text".into(),
        examples: vec![("2".into(), "4".into()), ("3".into(), "6".into())],
        system_prompt: None,
    };
    let out = few_shot_prompt(&s, "double", &mock_model(), &fs, &src, &GenerationConfig::default(), "out").unwrap();
    assert_eq!(column(out.dataset().unwrap(), "out"), ["MOCK:94c884a9d823c7a0"]);
    assert_eq!(out.kind, "few-shot-prompt");

    let calls = s.providers().transport_calls();
    few_shot_prompt(&s, "double-again", &mock_model(), &fs, &src, &GenerationConfig::default(), "out").unwrap();
    assert_eq!(s.providers().transport_calls(), calls);

    let none = FewShot {
        examples: vec![],
        ..fs
    };
    assert!(matches!(
        few_shot_prompt(&s, "x", &mock_model(), &none, &src, &GenerationConfig::default(), "out"),
        Err(Error::MissingExamples)
    ));
}

#[test]
fn generation_from_an_instruction() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let model = mock_model();
    let cfg = GenerationConfig::default();
    let none = generate_from_prompt(&s, "none", &model, "Write an abstract.", 0, &cfg).unwrap();
    assert_eq!(none.dataset().unwrap().len(), Some(0));

    let three = generate_from_prompt(&s, "gen", &model, "Write an abstract.", 3, &cfg).unwrap();
    assert_eq!(
        column(three.dataset().unwrap(), GENERATION_COLUMN),
        ["MOCK:6f24e8585d6cc79a", "MOCK:c2baf7f7902f6ae7", "MOCK:dee2efbad0dbffd4"]
    );
    assert_eq!(s.providers().transport_calls(), 3);

    let five = generate_from_prompt(&s, "gen", &model, "Write an abstract.", 5, &cfg).unwrap();
    assert_ne!(five.fingerprint, three.fingerprint);
    assert_eq!(s.providers().transport_calls(), 5);
}

#[test]
fn callback_steps() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["ax", "bx", "ay"])).unwrap();

    let a = filter_step(&s, "starts-a", &src, |r| r["text"].render().starts_with('a'), Some("starts-a")).unwrap();
    assert_eq!(column(a.dataset().unwrap(), "text"), ["ax", "ay"]);

    let nothing = filter_step(&s, "nothing", &src, |_| false, Some("never")).unwrap();
    assert_eq!(nothing.dataset().unwrap().len(), Some(0));
    let downstream = shuffle_step(&s, "after-nothing", &nothing, 1).unwrap();
    assert_eq!(downstream.status, Status::Completed);

    let lens = map_step(
        &s,
        "lens",
        &src,
        |r| record([("n", Value::Int(r["text"].render().len() as i64))]),
        &["n"],
        Some("len"),
    )
    .unwrap();
    assert_eq!(column(lens.dataset().unwrap(), "n"), ["2", "2", "2"]);

    let sh1 = shuffle_step(&s, "sh", &src, 7).unwrap();
    let sh2 = shuffle_step(&s, "sh", &src, 7).unwrap();
    assert_eq!(sh2.status, Status::Cached);
    assert_eq!(sh1.fingerprint, sh2.fingerprint);

    let both = concat_step(&s, "both", &[&src, &a]).unwrap();
    assert_eq!(column(both.dataset().unwrap(), "text"), ["ax", "bx", "ay", "ax", "ay"]);
}

#[test]
fn panicking_callback_fails_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["a"])).unwrap();
    let err = map_step(&s, "boom", &src, |_| panic!("kaboom"), &["text"], Some("k")).unwrap_err();
    match err {
        Error::StepFailed { name, source } => {
            assert_eq!(name, "boom");
            assert!(matches!(*source, Error::Panicked(ref m) if m.contains("kaboom")));
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(s.entry("boom").unwrap().status, Status::Failed);
}

#[test]
fn step_folder_layout() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["a"])).unwrap();
    for f in ["fingerprint.json", "status.json", "card.json", "card.md", "dataset/schema.json", "dataset/data.jsonl"] {
        assert!(src.dir.join(f).exists(), "missing {f}");
    }
    let text = fs::read_to_string(src.dir.join("fingerprint.json")).unwrap();
    assert!(text.contains(&src.fingerprint.to_hex()));
    assert_eq!(src.descriptor().fingerprint().unwrap(), src.fingerprint);
}

#[test]
fn missing_cards_are_regenerated_on_cache_hit() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["a"])).unwrap();
    let card = fs::read(src.dir.join("card.json")).unwrap();
    fs::remove_file(src.dir.join("card.json")).unwrap();
    drop(s);
    let s = open(dir.path());
    let again = data_source(&s, "src", texts(&["a"])).unwrap();
    assert_eq!(again.status, Status::Cached);
    assert_eq!(fs::read(again.dir.join("card.json")).unwrap(), card);
}

#[test]
fn background_steps_run_in_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let mock = Arc::new(MockProvider::new().with_delay(Duration::from_millis(1000)));
    let s = Session::open_with(dir.path(), with_mock(mock)).unwrap();
    let job = |name: &'static str, word: &'static str| {
        DeferredStep::new(name, move |s: &Session| {
            generate_from_prompt(s, name, &ModelRef::mock("mock-model-1"), word, 1, &GenerationConfig::default())
        })
    };
    let started = Instant::now();
    let h1 = run_in_background(&s, vec![job("left", "left")]).unwrap();
    let h2 = run_in_background(&s, vec![job("right", "right")]).unwrap();
    let r1 = h1.wait().unwrap();
    let r2 = h2.wait().unwrap();
    assert!(started.elapsed() < Duration::from_millis(1800), "{:?}", started.elapsed());
    assert_eq!(r1[0].status, Status::Completed);
    assert_eq!(r2[0].status, Status::Completed);
}

#[test]
fn background_failure_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let s = Session::open_with(dir.path(), quiet()).unwrap();
    let src = data_source(&s, "src", texts(&["a"])).unwrap();
    let bad_src = src.clone();
    let bad = run_in_background(
        &s,
        vec![DeferredStep::new("bad", move |s: &Session| {
            map_step(s, "bad", &bad_src, |_| panic!("nope"), &["text"], Some("bad"))
        })],
    )
    .unwrap();
    let good = run_in_background(
        &s,
        vec![DeferredStep::new("good", move |s: &Session| shuffle_step(s, "good", &src, 1))],
    )
    .unwrap();
    assert!(matches!(bad.wait(), Err(Error::StepFailed { .. })));
    assert_eq!(good.wait().unwrap()[0].status, Status::Completed);
}

#[test]
fn background_name_clash_is_refused_at_submission() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let src = data_source(&s, "src", texts(&["a"])).unwrap();
    let err = run_in_background(
        &s,
        vec![DeferredStep::new("src", move |s: &Session| shuffle_step(s, "src", &src, 1))],
    )
    .unwrap_err();
    assert!(matches!(err, Error::NameConflict(ref n) if n == "src"), "{err}");
}

#[test]
fn uncached_input_is_not_ready() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path());
    let mut src = data_source(&s, "src", texts(&["a"])).unwrap();
    src.status = Status::Failed;
    assert!(matches!(shuffle_step(&s, "next", &src, 1), Err(Error::InputNotReady(_))));
}
