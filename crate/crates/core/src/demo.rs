//! A desk-scale end-to-end workflow: synthetic abstracts, tweet-style
//! summaries of them, a derived two-class labeling, and a toy classifier
//! trained on it. Used by the `dreamforge-demo` binary and the tests.

use std::fs;

use crate::dataset::{Record, Value};
use crate::error::{IoContext, Result};
use crate::fingerprint::Fingerprint;
use crate::model::{GenerationConfig, ModelRef};
use crate::session::Session;
use crate::step::{generate_from_prompt, map_step, process_with_prompt, PromptTemplate, StepRecord, GENERATION_COLUMN};
use crate::trainer::{train_toy, ToyHyperparams, TrainerRecord};

pub const ABSTRACT_INSTRUCTION: &str = "Write the abstract of a machine learning paper.";
pub const TWEET_TEMPLATE: &str = "Summarize this abstract as a tweet:\n{{generation}}";
pub const LABEL_LOGIC_KEY: &str = "label-by-abstract-digest-parity-v1";

#[derive(Clone, Debug)]
pub struct DemoConfig {
    pub n: usize,
    pub model: ModelRef,
    pub generation: GenerationConfig,
    pub hyperparams: ToyHyperparams,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            n: 100,
            model: ModelRef::mock("mock-model-1"),
            generation: GenerationConfig::default(),
            hyperparams: ToyHyperparams {
                lr: 0.1,
                epochs: 2,
                seed: 7,
                checkpoint_every: 50,
            },
        }
    }
}

pub struct DemoOutputs {
    pub abstracts: StepRecord,
    pub tweets: StepRecord,
    pub labeled: StepRecord,
    pub classifier: TrainerRecord,
}

impl DemoOutputs {
    /// `(node name, hash)` for every output: dataset content hashes, then
    /// the SHA-256 of the classifier weights.
    pub fn summary(&self) -> Result<Vec<(String, Fingerprint)>> {
        let mut out = Vec::new();
        for s in [&self.abstracts, &self.tweets, &self.labeled] {
            out.push((s.name.clone(), s.dataset()?.compute_content_hash()?));
        }
        let weights = self.classifier.weights_path();
        let bytes = fs::read(&weights).at(&weights)?;
        out.push((self.classifier.name.clone(), Fingerprint::of_bytes(&bytes)));
        Ok(out)
    }
}

/// Labels an abstract by the parity of the last hex digit in its text.
fn label_of(abstract_text: &str) -> &'static str {
    let last = abstract_text.chars().rev().find_map(|c| c.to_digit(16)).unwrap_or(0);
    if last % 2 == 0 {
        "even"
    } else {
        "odd"
    }
}

pub fn run_demo(session: &Session, cfg: &DemoConfig) -> Result<DemoOutputs> {
    let abstracts = generate_from_prompt(session, "abstracts", &cfg.model, ABSTRACT_INSTRUCTION, cfg.n, &cfg.generation)?;
    let tweets = process_with_prompt(
        session,
        "tweets",
        &cfg.model,
        &PromptTemplate::new(TWEET_TEMPLATE),
        &abstracts,
        &cfg.generation,
        "tweet",
    )?;
    let labeled = map_step(
        session,
        "labeled",
        &tweets,
        |r: &Record| {
            let text = r.get(GENERATION_COLUMN).and_then(Value::as_str).unwrap_or_default();
            let mut out = r.clone();
            out.insert("label".into(), Value::from(label_of(text)));
            out
        },
        &[GENERATION_COLUMN, "tweet", "label"],
        Some(LABEL_LOGIC_KEY),
    )?;
    let classifier = train_toy(session, "classifier", &labeled, "tweet", "label", &cfg.hyperparams)?;
    Ok(DemoOutputs {
        abstracts,
        tweets,
        labeled,
        classifier,
    })
}
