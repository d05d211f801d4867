//! Steps: cached, resumable dataset transformations.
//!
//! Every step is an [`Operator`] run through [`run_step`], which computes the
//! node fingerprint, loads a matching prior output from disk, resumes a
//! matching failed run, or executes and streams a fresh output.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetWriter, Record, Value};
use crate::error::{Error, IoContext, Result};
use crate::fingerprint::{CanonicalValue, Fingerprint, NodeDescriptor};
use crate::fsutil::{now_rfc3339, write_atomic};
use crate::model::{generation_key, GenerationConfig, ModelClient, ModelRef};
use crate::session::{normalize_name, with_job, LogLevel, NodeFolder, Session, Status};

pub const FINGERPRINT_FILE: &str = "fingerprint.json";
pub const STATUS_FILE: &str = "status.json";
pub const PROGRESS_FILE: &str = "progress.json";
pub const DATASET_DIR: &str = "dataset";
pub const CARD_JSON: &str = "card.json";
pub const CARD_MD: &str = "card.md";
pub const FEW_SHOT_SEPARATOR: &str = "\n###\n";
pub const GENERATION_COLUMN: &str = "generation";

/// `status.json`: run bookkeeping for the CLI and cards. Never fingerprinted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusFile {
    pub citation: Option<String>,
    pub completed_at: Option<String>,
    pub duration_ms: Option<u64>,
    pub error: Option<String>,
    pub kind: String,
    pub license: Option<String>,
    pub models: Vec<ModelRef>,
    pub name: String,
    pub progress: usize,
    pub rows: Option<usize>,
    pub started_at: String,
    pub status: Status,
    pub version: u32,
}

impl StatusFile {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(STATUS_FILE);
        let bytes = fs::read(&path).at(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::malformed(STATUS_FILE, e))
    }

    pub(crate) fn write(&self, dir: &Path) -> Result<()> {
        let value = serde_json::to_value(self).expect("status serializes");
        let mut bytes = serde_json::to_vec_pretty(&value).expect("status serializes");
        bytes.push(b'\n');
        write_atomic(&dir.join(STATUS_FILE), &bytes)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ProgressFile {
    fingerprint: Fingerprint,
    records_done: usize,
    updated_at: String,
}

/// One workflow node and, once done, its output.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub name: String,
    pub kind: String,
    pub version: u32,
    pub args: BTreeMap<String, CanonicalValue>,
    pub inputs: Vec<Fingerprint>,
    pub fingerprint: Fingerprint,
    pub status: Status,
    pub output: Option<Dataset>,
    /// Output rows written so far.
    pub progress: usize,
    pub dir: PathBuf,
}

impl StepRecord {
    pub fn dataset(&self) -> Result<&Dataset> {
        match (&self.output, self.status.is_done()) {
            (Some(d), true) => Ok(d),
            _ => Err(Error::NotCompleted(self.name.clone())),
        }
    }

    pub fn descriptor(&self) -> NodeDescriptor {
        NodeDescriptor::new(self.kind.clone(), self.version, self.args.clone(), self.inputs.clone())
    }

    /// Reads a completed step folder, verifying its dataset.
    pub fn load(dir: &Path) -> Result<StepRecord> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (fingerprint, node) = read_fingerprint_file(dir)?;
        let status = StatusFile::read(dir)?;
        if !status.status.is_done() {
            return Err(Error::NotCompleted(name));
        }
        let output = Dataset::load(&dir.join(DATASET_DIR))?;
        Ok(StepRecord {
            name,
            kind: node.kind,
            version: node.version,
            args: node.args,
            inputs: node.inputs,
            fingerprint,
            status: Status::Cached,
            progress: output.len().unwrap_or(0),
            output: Some(output),
            dir: dir.to_path_buf(),
        })
    }
}

pub fn read_fingerprint_file(dir: &Path) -> Result<(Fingerprint, NodeDescriptor)> {
    let path = dir.join(FINGERPRINT_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    NodeDescriptor::parse_fingerprint_file(&text)
}

/// A step implementation. Instances are registered with [`run_step`]; the
/// built-ins cover data sources, prompting, and dataset transforms.
pub trait Operator: Send + Sync {
    fn kind(&self) -> &str;

    fn version(&self) -> u32 {
        1
    }

    /// Fingerprinted arguments. `None` means the step carries logic that
    /// cannot be fingerprinted and no logic key was supplied.
    fn args(&self) -> Option<BTreeMap<String, CanonicalValue>>;

    /// Models this step calls; they become ancestry nodes in cards.
    fn models(&self) -> Vec<ModelRef> {
        Vec::new()
    }

    fn license(&self) -> Option<String> {
        None
    }

    fn citation(&self) -> Option<String> {
        None
    }

    /// Whether a failed run may continue from its committed rows.
    fn resumable(&self) -> bool {
        false
    }

    /// Output columns for these inputs; also the place to reject bad inputs.
    fn output_columns(&self, inputs: &[Dataset]) -> Result<Vec<String>>;

    fn execute(&self, ctx: &mut StepContext<'_>) -> Result<()>;
}

/// What an executing operator sees.
pub struct StepContext<'a> {
    session: &'a Session,
    name: &'a str,
    fingerprint: Fingerprint,
    dir: &'a Path,
    inputs: Vec<Dataset>,
    writer: DatasetWriter,
    resume_from: usize,
    since_checkpoint: usize,
}

impl<'a> StepContext<'a> {
    pub fn session(&self) -> &Session {
        self.session
    }

    pub fn client(&self) -> &ModelClient {
        self.session.client()
    }

    pub fn name(&self) -> &str {
        self.name
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn inputs(&self) -> &[Dataset] {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> Result<&Dataset> {
        self.inputs
            .get(i)
            .ok_or_else(|| Error::InvalidValue(format!("step `{}` has no input {i}", self.name)))
    }

    /// Output rows already committed by an interrupted earlier run.
    pub fn resume_from(&self) -> usize {
        self.resume_from
    }

    pub fn rows_written(&self) -> usize {
        self.writer.rows_written()
    }

    /// Appends one output row, checkpointing progress periodically.
    pub fn emit(&mut self, r: &Record) -> Result<()> {
        self.writer.write(r)?;
        self.since_checkpoint += 1;
        if self.since_checkpoint >= self.session.progress_interval() {
            self.checkpoint()?;
        }
        Ok(())
    }

    /// Makes written rows durable and records how many there are.
    pub fn checkpoint(&mut self) -> Result<()> {
        self.writer.flush()?;
        write_progress(self.dir, &self.fingerprint, self.writer.rows_written())?;
        self.since_checkpoint = 0;
        Ok(())
    }

    pub fn log(&self, level: LogLevel, message: &str) {
        self.session.log(level, Some(self.name), message);
    }

    /// Runs `(system_prompt, prompt)` items through the model in chunks of
    /// the session's in-flight limit, emitting `row + {out_column: text}` in
    /// input order.
    pub fn emit_generations<I>(&mut self, model: &ModelRef, config: &GenerationConfig, out_column: &str, items: I) -> Result<()>
    where
        I: Iterator<Item = Result<(Record, Option<String>, String)>>,
    {
        let in_flight = self.session.in_flight();
        let mut items = items.peekable();
        while items.peek().is_some() {
            let mut rows = Vec::with_capacity(in_flight);
            let mut prompts = Vec::with_capacity(in_flight);
            for item in items.by_ref().take(in_flight) {
                let (row, system, prompt) = item?;
                rows.push(row);
                prompts.push((system, prompt));
            }
            let keys: Vec<Fingerprint> = prompts
                .iter()
                .map(|(s, p)| generation_key(model, s.as_deref(), p, config).0)
                .collect();
            self.session.prompt_cache().record_usage(&self.fingerprint, &keys)?;
            let out = self.client().generate_batch(model, &prompts, config, in_flight)?;
            for (mut row, text) in rows.into_iter().zip(out.texts) {
                row.insert(out_column.to_string(), Value::Text(text));
                self.emit(&row)?;
            }
        }
        Ok(())
    }
}

fn write_progress(dir: &Path, fp: &Fingerprint, records_done: usize) -> Result<()> {
    let p = ProgressFile {
        fingerprint: *fp,
        records_done,
        updated_at: now_rfc3339(),
    };
    let mut bytes = serde_json::to_vec_pretty(&p).expect("progress serializes");
    bytes.push(b'\n');
    write_atomic(&dir.join(PROGRESS_FILE), &bytes)
}

fn read_progress(dir: &Path, fp: &Fingerprint) -> Option<usize> {
    let bytes = fs::read(dir.join(PROGRESS_FILE)).ok()?;
    let p: ProgressFile = serde_json::from_slice(&bytes).ok()?;
    (p.fingerprint == *fp).then_some(p.records_done)
}

/// What a node folder held before this run.
pub(crate) enum Prior {
    Fresh,
    Same(Option<StatusFile>),
}

/// Makes `dir` safe to (re)use for fingerprint `fp`: a folder written for
/// another fingerprint is renamed to `<name>.bak-<old fp prefix>`.
pub(crate) fn prepare_node_dir(session: &Session, name: &str, dir: &Path, fp: &Fingerprint) -> Result<Prior> {
    if !dir.exists() {
        return Ok(Prior::Fresh);
    }
    let old = match read_fingerprint_file(dir) {
        Ok((old, _)) if old == *fp => return Ok(Prior::Same(StatusFile::read(dir).ok())),
        Ok((old, _)) => old.short(8),
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
            // Interrupted before anything durable was written.
            fs::remove_dir_all(dir).at(dir)?;
            return Ok(Prior::Fresh);
        }
        Err(_) => "corrupt0".to_string(),
    };
    let bak = dir.with_file_name(format!("{name}.bak-{old}"));
    if bak.exists() {
        fs::remove_dir_all(&bak).at(&bak)?;
    }
    fs::rename(dir, &bak).at(dir)?;
    session.log(
        LogLevel::Info,
        Some(name),
        &format!("configuration changed; previous output moved to {}", bak.display()),
    );
    Ok(Prior::Fresh)
}

pub(crate) fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

/// Runs `op` as step `name` over `inputs`, loading a cached output when the
/// fingerprint matches a completed prior run.
pub fn run_step(session: &Session, name: &str, op: &dyn Operator, inputs: &[&StepRecord]) -> Result<StepRecord> {
    session.ensure_open()?;
    for input in inputs {
        if !input.status.is_done() {
            return Err(Error::InputNotReady(input.name.clone()));
        }
    }
    let args = op
        .args()
        .ok_or_else(|| Error::UncacheableWithoutLogicKey(name.to_string()))?;
    let node = NodeDescriptor::new(op.kind(), op.version(), args, inputs.iter().map(|r| r.fingerprint).collect());
    let (fingerprint, fp_bytes) = node.fingerprint_file()?;
    let input_data: Vec<Dataset> = inputs.iter().map(|r| r.dataset().cloned()).collect::<Result<_>>()?;
    let columns = op.output_columns(&input_data)?;
    let name = session.register_step(name, &fingerprint, NodeFolder::Steps)?;
    let dir = session.node_dir(NodeFolder::Steps, &name);
    let record = |status: Status, output: Dataset| StepRecord {
        name: name.clone(),
        kind: node.kind.clone(),
        version: node.version,
        args: node.args.clone(),
        inputs: node.inputs.clone(),
        fingerprint,
        status,
        progress: output.len().unwrap_or(0),
        output: Some(output),
        dir: dir.clone(),
    };

    let mut resume = None;
    match prepare_node_dir(session, &name, &dir, &fingerprint)? {
        Prior::Same(Some(st)) if st.status.is_done() => match Dataset::load(&dir.join(DATASET_DIR)) {
            Ok(output) => {
                if !dir.join(CARD_JSON).exists() || !dir.join(CARD_MD).exists() {
                    crate::provenance::write_cards(session.dir(), &dir)?;
                }
                session.set_status(&name, &fingerprint, Status::Cached)?;
                session.log(LogLevel::Info, Some(&name), &format!("loaded from cache ({})", fingerprint.short(12)));
                return Ok(record(Status::Cached, output));
            }
            Err(e) => {
                session.log(LogLevel::Warn, Some(&name), &format!("saved output unusable ({e}); recomputing"));
            }
        },
        Prior::Same(_) if op.resumable() => resume = read_progress(&dir, &fingerprint),
        _ => {}
    }

    fs::create_dir_all(&dir).at(&dir)?;
    write_atomic(&dir.join(FINGERPRINT_FILE), &fp_bytes)?;
    let started_at = now_rfc3339();
    let clock = Instant::now();
    let mut status = StatusFile {
        citation: op.citation(),
        completed_at: None,
        duration_ms: None,
        error: None,
        kind: node.kind.clone(),
        license: op.license(),
        models: op.models(),
        name: name.clone(),
        progress: resume.unwrap_or(0),
        rows: None,
        started_at,
        status: Status::Running,
        version: node.version,
    };
    status.write(&dir)?;
    session.set_status(&name, &fingerprint, Status::Running)?;
    session.count_execution(&name);

    let ds_dir = dir.join(DATASET_DIR);
    let writer = match resume {
        Some(keep) => match DatasetWriter::resume(&ds_dir, &columns, keep) {
            Ok(w) => {
                session.log(LogLevel::Info, Some(&name), &format!("resuming after {keep} committed rows"));
                w
            }
            Err(e) => {
                session.log(LogLevel::Warn, Some(&name), &format!("cannot resume ({e}); starting over"));
                DatasetWriter::create(&ds_dir, &columns)?
            }
        },
        None => DatasetWriter::create(&ds_dir, &columns)?,
    };
    let mut ctx = StepContext {
        session,
        name: &name,
        fingerprint,
        dir: &dir,
        inputs: input_data,
        resume_from: writer.rows_written(),
        writer,
        since_checkpoint: 0,
    };
    session.log(LogLevel::Info, Some(&name), &format!("running {} ({})", node.kind, fingerprint.short(12)));
    let outcome = catch_unwind(AssertUnwindSafe(|| op.execute(&mut ctx)))
        .unwrap_or_else(|p| Err(Error::Panicked(panic_message(p))));

    let StepContext { mut writer, .. } = ctx;
    let result = match outcome {
        Ok(()) => writer.finish().map_err(|e| (e, None)),
        Err(e) => {
            // Rows are committed in input order, so whatever is durable is a
            // valid prefix to resume from.
            let done = writer.flush().ok().map(|()| writer.rows_written());
            Err((e, done))
        }
    };
    status.duration_ms = Some(clock.elapsed().as_millis() as u64);
    match result {
        Ok(output) => {
            let _ = fs::remove_file(dir.join(PROGRESS_FILE));
            let rows = output.len().unwrap_or(0);
            status.status = Status::Completed;
            status.completed_at = Some(now_rfc3339());
            status.rows = Some(rows);
            status.progress = rows;
            status.write(&dir)?;
            crate::provenance::write_cards(session.dir(), &dir)?;
            session.set_status(&name, &fingerprint, Status::Completed)?;
            session.log(
                LogLevel::Info,
                Some(&name),
                &format!("completed: {rows} rows in {} ms", status.duration_ms.unwrap_or(0)),
            );
            Ok(record(Status::Completed, output))
        }
        Err((err, done)) => {
            if let Some(done) = done {
                write_progress(&dir, &fingerprint, done)?;
                status.progress = done;
            }
            status.status = Status::Failed;
            status.error = Some(err.to_string());
            status.write(&dir)?;
            session.set_status(&name, &fingerprint, Status::Failed)?;
            session.log(LogLevel::Error, Some(&name), &format!("failed: {err}"));
            Err(Error::StepFailed {
                name,
                source: Box::new(err),
            })
        }
    }
}

fn record_to_canonical(r: &Record) -> CanonicalValue {
    CanonicalValue::Map(r.iter().map(|(k, v)| (k.clone(), v.to_canonical())).collect())
}

/// A prompt with `{{column}}` placeholders, an optional system prompt, and
/// optional few-shot examples rendered ahead of the query.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub template: String,
    pub system_prompt: Option<String>,
    pub few_shot_examples: Option<Vec<(Record, String)>>,
}

enum Piece<'t> {
    Text(&'t str),
    Column(&'t str),
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Self {
        PromptTemplate {
            template: template.into(),
            system_prompt: None,
            few_shot_examples: None,
        }
    }

    pub fn with_system_prompt(mut self, system: impl Into<String>) -> Self {
        self.system_prompt = Some(system.into());
        self
    }

    pub fn with_examples(mut self, examples: Vec<(Record, String)>) -> Self {
        self.few_shot_examples = Some(examples);
        self
    }

    fn pieces(&self) -> Result<Vec<Piece<'_>>> {
        let mut out = Vec::new();
        let mut rest = self.template.as_str();
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                out.push(Piece::Text(&rest[..open]));
            }
            let after = &rest[open + 2..];
            let close = after
                .find("}}")
                .ok_or_else(|| Error::InvalidTemplate(format!("unclosed `{{{{` in `{}`", self.template)))?;
            let column = &after[..close];
            if column.is_empty() || column.contains("{{") {
                return Err(Error::InvalidTemplate(format!("bad placeholder in `{}`", self.template)));
            }
            out.push(Piece::Column(column));
            rest = &after[close + 2..];
        }
        if !rest.is_empty() {
            out.push(Piece::Text(rest));
        }
        Ok(out)
    }

    /// Placeholder column names in order of appearance, with repeats.
    pub fn placeholders(&self) -> Result<Vec<String>> {
        Ok(self
            .pieces()?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Column(c) => Some(c.to_string()),
                Piece::Text(_) => None,
            })
            .collect())
    }

    /// Substitutes the record's values; text is inserted verbatim.
    pub fn render(&self, r: &Record) -> Result<String> {
        let mut out = String::with_capacity(self.template.len());
        for piece in self.pieces()? {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Column(c) => {
                    let v = r
                        .get(c)
                        .ok_or_else(|| Error::InvalidTemplate(format!("placeholder `{c}` names no column")))?;
                    out.push_str(&v.render());
                }
            }
        }
        Ok(out)
    }

    /// The full user prompt: example inputs and outputs in order, then the
    /// query, joined by the few-shot separator.
    pub fn render_prompt(&self, r: &Record) -> Result<String> {
        let mut parts = Vec::new();
        for (input, output) in self.few_shot_examples.iter().flatten() {
            parts.push(self.render(input)?);
            parts.push(output.clone());
        }
        parts.push(self.render(r)?);
        Ok(parts.join(FEW_SHOT_SEPARATOR))
    }

    /// Checks that every placeholder names one of `columns` and that the
    /// examples can be rendered.
    pub fn validate(&self, columns: &[String]) -> Result<()> {
        for c in self.placeholders()? {
            if !columns.contains(&c) {
                return Err(Error::InvalidTemplate(format!("placeholder `{c}` names no input column")));
            }
        }
        for (input, _) in self.few_shot_examples.iter().flatten() {
            self.render(input)?;
        }
        Ok(())
    }

    pub fn to_canonical(&self) -> CanonicalValue {
        let examples = self.few_shot_examples.as_ref().map(|ex| {
            CanonicalValue::List(
                ex.iter()
                    .map(|(input, output)| {
                        CanonicalValue::map([
                            ("input", record_to_canonical(input)),
                            ("output", CanonicalValue::from(output.as_str())),
                        ])
                    })
                    .collect(),
            )
        });
        CanonicalValue::map([
            ("few_shot_examples", examples.unwrap_or(CanonicalValue::Null)),
            ("system_prompt", CanonicalValue::from(self.system_prompt.clone())),
            ("template", CanonicalValue::from(self.template.as_str())),
        ])
    }
}

/// Wraps a literal dataset as a step, addressed by its content hash.
pub struct DataSource {
    dataset: Dataset,
    hash: Fingerprint,
}

impl DataSource {
    pub fn new(dataset: Dataset) -> Result<Self> {
        let hash = dataset.compute_content_hash()?;
        Ok(DataSource { dataset, hash })
    }
}

impl Operator for DataSource {
    fn kind(&self) -> &str {
        "data-source"
    }

    fn args(&self) -> Option<BTreeMap<String, CanonicalValue>> {
        Some(BTreeMap::from([("content".to_string(), CanonicalValue::Fp(self.hash))]))
    }

    fn output_columns(&self, _inputs: &[Dataset]) -> Result<Vec<String>> {
        Ok(self.dataset.columns().to_vec())
    }

    fn execute(&self, ctx: &mut StepContext<'_>) -> Result<()> {
        for r in self.dataset.iter() {
            ctx.emit(&r?)?;
        }
        Ok(())
    }
}

/// Renders a prompt per input row and appends the model's completion.
pub struct ProcessWithPrompt {
    kind: &'static str,
    pub model: ModelRef,
    pub template: PromptTemplate,
    pub config: GenerationConfig,
    pub out_column: String,
}

impl ProcessWithPrompt {
    pub fn new(model: ModelRef, template: PromptTemplate, config: GenerationConfig, out_column: impl Into<String>) -> Self {
        ProcessWithPrompt {
            kind: "process-with-prompt",
            model,
            template,
            config,
            out_column: out_column.into(),
        }
    }
}

impl Operator for ProcessWithPrompt {
    fn kind(&self) -> &str {
        self.kind
    }

    fn args(&self) -> Option<BTreeMap<String, CanonicalValue>> {
        let CanonicalValue::Map(mut args) = self.template.to_canonical() else { unreachable!() };
        args.insert("generation".into(), self.config.to_canonical());
        args.insert("model".into(), CanonicalValue::Fp(self.model.fingerprint()));
        args.insert("out_column".into(), CanonicalValue::from(self.out_column.as_str()));
        Some(args)
    }

    fn models(&self) -> Vec<ModelRef> {
        vec![self.model.clone()]
    }

    fn resumable(&self) -> bool {
        true
    }

    fn output_columns(&self, inputs: &[Dataset]) -> Result<Vec<String>> {
        let [input] = inputs else {
            return Err(Error::InvalidValue(format!("{} takes exactly one input", self.kind)));
        };
        self.model.validate()?;
        self.config.validate()?;
        self.template.validate(input.columns())?;
        if input.columns().contains(&self.out_column) {
            return Err(Error::SchemaMismatch(format!("output column `{}` already exists", self.out_column)));
        }
        let mut cols = input.columns().to_vec();
        cols.push(self.out_column.clone());
        Ok(cols)
    }

    fn execute(&self, ctx: &mut StepContext<'_>) -> Result<()> {
        let input = ctx.input(0)?.clone();
        let skip = ctx.resume_from();
        let template = &self.template;
        let items = input.iter().skip(skip).map(|r| {
            let r = r?;
            let prompt = template.render_prompt(&r)?;
            Ok((r, template.system_prompt.clone(), prompt))
        });
        ctx.emit_generations(&self.model, &self.config, &self.out_column, items)
    }
}

/// Produces `n` generations from one instruction; row `i` is prompted with
/// the instruction followed by `"\n[item i]"`.
pub struct GenerateFromPrompt {
    pub model: ModelRef,
    pub instruction: String,
    pub n: usize,
    pub config: GenerationConfig,
}

impl GenerateFromPrompt {
    pub fn prompt(&self, i: usize) -> String {
        format!("{}\n[item {i}]", self.instruction)
    }
}

impl Operator for GenerateFromPrompt {
    fn kind(&self) -> &str {
        "generate-from-prompt"
    }

    fn args(&self) -> Option<BTreeMap<String, CanonicalValue>> {
        Some(BTreeMap::from([
            ("generation".to_string(), self.config.to_canonical()),
            ("instruction".to_string(), CanonicalValue::from(self.instruction.as_str())),
            ("model".to_string(), CanonicalValue::Fp(self.model.fingerprint())),
            ("n".to_string(), CanonicalValue::from(self.n)),
        ]))
    }

    fn models(&self) -> Vec<ModelRef> {
        vec![self.model.clone()]
    }

    fn resumable(&self) -> bool {
        true
    }

    fn output_columns(&self, inputs: &[Dataset]) -> Result<Vec<String>> {
        if !inputs.is_empty() {
            return Err(Error::InvalidValue("generate-from-prompt takes no inputs".into()));
        }
        self.model.validate()?;
        self.config.validate()?;
        Ok(vec![GENERATION_COLUMN.to_string()])
    }

    fn execute(&self, ctx: &mut StepContext<'_>) -> Result<()> {
        let items = (ctx.resume_from()..self.n).map(|i| Ok((Record::new(), None, self.prompt(i))));
        ctx.emit_generations(&self.model, &self.config, GENERATION_COLUMN, items)
    }
}

pub type MapFn = Arc<dyn Fn(&Record) -> Record + Send + Sync>;
pub type FilterFn = Arc<dyn Fn(&Record) -> bool + Send + Sync>;

/// Applies a callback to every row. Cacheable only with a logic key.
pub struct MapOp {
    pub f: MapFn,
    pub out_columns: Vec<String>,
    pub logic_key: Option<String>,
}

impl Operator for MapOp {
    fn kind(&self) -> &str {
        "map"
    }

    fn args(&self) -> Option<BTreeMap<String, CanonicalValue>> {
        let key = self.logic_key.as_ref()?;
        Some(BTreeMap::from([
            ("logic_key".to_string(), CanonicalValue::from(key.as_str())),
            ("out_columns".to_string(), CanonicalValue::from(self.out_columns.clone())),
        ]))
    }

    fn output_columns(&self, inputs: &[Dataset]) -> Result<Vec<String>> {
        if inputs.len() != 1 {
            return Err(Error::InvalidValue("map takes exactly one input".into()));
        }
        Ok(self.out_columns.clone())
    }

    fn execute(&self, ctx: &mut StepContext<'_>) -> Result<()> {
        let f = self.f.clone();
        let cols: Vec<&str> = self.out_columns.iter().map(String::as_str).collect();
        let mapped = ctx.input(0)?.map(move |r| f(r), &cols)?;
        for r in mapped.iter() {
            ctx.emit(&r?)?;
        }
        Ok(())
    }
}

/// Keeps rows matching a predicate. Cacheable only with a logic key.
pub struct FilterOp {
    pub p: FilterFn,
    pub logic_key: Option<String>,
}

impl Operator for FilterOp {
    fn kind(&self) -> &str {
        "filter"
    }

    fn args(&self) -> Option<BTreeMap<String, CanonicalValue>> {
        let key = self.logic_key.as_ref()?;
        Some(BTreeMap::from([("logic_key".to_string(), CanonicalValue::from(key.as_str()))]))
    }

    fn output_columns(&self, inputs: &[Dataset]) -> Result<Vec<String>> {
        match inputs {
            [input] => Ok(input.columns().to_vec()),
            _ => Err(Error::InvalidValue("filter takes exactly one input".into())),
        }
    }

    fn execute(&self, ctx: &mut StepContext<'_>) -> Result<()> {
        let p = self.p.clone();
        let kept = ctx.input(0)?.filter(move |r| p(r))?;
        for r in kept.iter() {
            ctx.emit(&r?)?;
        }
        Ok(())
    }
}

pub struct ShuffleOp {
    pub seed: u64,
}

impl Operator for ShuffleOp {
    fn kind(&self) -> &str {
        "shuffle"
    }

    fn args(&self) -> Option<BTreeMap<String, CanonicalValue>> {
        Some(BTreeMap::from([("seed".to_string(), CanonicalValue::from(self.seed))]))
    }

    fn output_columns(&self, inputs: &[Dataset]) -> Result<Vec<String>> {
        match inputs {
            [input] => Ok(input.columns().to_vec()),
            _ => Err(Error::InvalidValue("shuffle takes exactly one input".into())),
        }
    }

    fn execute(&self, ctx: &mut StepContext<'_>) -> Result<()> {
        let shuffled = ctx.input(0)?.shuffle(self.seed)?;
        for r in shuffled.iter() {
            ctx.emit(&r?)?;
        }
        Ok(())
    }
}

pub struct ConcatOp;

impl Operator for ConcatOp {
    fn kind(&self) -> &str {
        "concat"
    }

    fn args(&self) -> Option<BTreeMap<String, CanonicalValue>> {
        Some(BTreeMap::new())
    }

    fn output_columns(&self, inputs: &[Dataset]) -> Result<Vec<String>> {
        Ok(Dataset::concat(inputs)?.columns().to_vec())
    }

    fn execute(&self, ctx: &mut StepContext<'_>) -> Result<()> {
        let all = Dataset::concat(ctx.inputs())?;
        for r in all.iter() {
            ctx.emit(&r?)?;
        }
        Ok(())
    }
}

pub fn data_source(session: &Session, name: &str, dataset: Dataset) -> Result<StepRecord> {
    run_step(session, name, &DataSource::new(dataset)?, &[])
}

pub fn process_with_prompt(
    session: &Session,
    name: &str,
    model: &ModelRef,
    template: &PromptTemplate,
    input: &StepRecord,
    config: &GenerationConfig,
    out_column: &str,
) -> Result<StepRecord> {
    let op = ProcessWithPrompt::new(model.clone(), template.clone(), config.clone(), out_column);
    run_step(session, name, &op, &[input])
}

/// Few-shot prompting over one input column.
#[derive(Clone, Debug, Default)]
pub struct FewShot {
    pub input_column: String,
    pub examples: Vec<(String, String)>,
    pub system_prompt: Option<String>,
}

pub fn few_shot_prompt(
    session: &Session,
    name: &str,
    model: &ModelRef,
    few_shot: &FewShot,
    input: &StepRecord,
    config: &GenerationConfig,
    out_column: &str,
) -> Result<StepRecord> {
    if few_shot.examples.is_empty() {
        return Err(Error::MissingExamples);
    }
    let col = &few_shot.input_column;
    let examples = few_shot
        .examples
        .iter()
        .map(|(i, o)| (Record::from([(col.clone(), Value::Text(i.clone()))]), o.clone()))
        .collect();
    let template = PromptTemplate {
        template: format!("{{{{{col}}}}}"),
        system_prompt: few_shot.system_prompt.clone(),
        few_shot_examples: Some(examples),
    };
    let mut op = ProcessWithPrompt::new(model.clone(), template, config.clone(), out_column);
    op.kind = "few-shot-prompt";
    run_step(session, name, &op, &[input])
}

pub fn generate_from_prompt(
    session: &Session,
    name: &str,
    model: &ModelRef,
    instruction: &str,
    n: usize,
    config: &GenerationConfig,
) -> Result<StepRecord> {
    let op = GenerateFromPrompt {
        model: model.clone(),
        instruction: instruction.to_string(),
        n,
        config: config.clone(),
    };
    run_step(session, name, &op, &[])
}

pub fn map_step<F>(
    session: &Session,
    name: &str,
    input: &StepRecord,
    f: F,
    out_columns: &[&str],
    logic_key: Option<&str>,
) -> Result<StepRecord>
where
    F: Fn(&Record) -> Record + Send + Sync + 'static,
{
    let op = MapOp {
        f: Arc::new(f),
        out_columns: out_columns.iter().map(|c| c.to_string()).collect(),
        logic_key: logic_key.map(str::to_string),
    };
    run_step(session, name, &op, &[input])
}

pub fn filter_step<P>(session: &Session, name: &str, input: &StepRecord, p: P, logic_key: Option<&str>) -> Result<StepRecord>
where
    P: Fn(&Record) -> bool + Send + Sync + 'static,
{
    let op = FilterOp {
        p: Arc::new(p),
        logic_key: logic_key.map(str::to_string),
    };
    run_step(session, name, &op, &[input])
}

pub fn shuffle_step(session: &Session, name: &str, input: &StepRecord, seed: u64) -> Result<StepRecord> {
    run_step(session, name, &ShuffleOp { seed }, &[input])
}

pub fn concat_step(session: &Session, name: &str, inputs: &[&StepRecord]) -> Result<StepRecord> {
    run_step(session, name, &ConcatOp, inputs)
}

type DeferredFn = Box<dyn FnOnce(&Session) -> Result<StepRecord> + Send>;

/// A step to run later on a background thread, declared with the name it
/// will register under.
pub struct DeferredStep {
    name: String,
    run: DeferredFn,
}

impl DeferredStep {
    pub fn new(name: impl Into<String>, run: impl FnOnce(&Session) -> Result<StepRecord> + Send + 'static) -> Self {
        DeferredStep {
            name: name.into(),
            run: Box::new(run),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

#[derive(Debug)]
pub struct BackgroundHandle {
    thread: JoinHandle<Result<Vec<StepRecord>>>,
}

impl BackgroundHandle {
    /// Blocks until the job ends; returns its records or its first error.
    pub fn wait(self) -> Result<Vec<StepRecord>> {
        self.thread
            .join()
            .unwrap_or_else(|p| Err(Error::Panicked(panic_message(p))))
    }

    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }
}

/// Runs `steps` in order on a new thread. Their names are reserved up front:
/// a name already claimed in this run or held by another background job is
/// a [`Error::NameConflict`] here, before anything runs.
pub fn run_in_background(session: &Session, steps: Vec<DeferredStep>) -> Result<BackgroundHandle> {
    let names = steps.iter().map(|s| normalize_name(&s.name)).collect::<Result<Vec<_>>>()?;
    let job = session.reserve_names(&names)?;
    let session = session.share();
    let thread = std::thread::spawn(move || {
        let result = with_job(job, || {
            let mut records = Vec::with_capacity(steps.len());
            for step in steps {
                records.push((step.run)(&session)?);
            }
            Ok(records)
        });
        session.release_names(job);
        result
    });
    Ok(BackgroundHandle { thread })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::record;

    #[test]
    fn template_rendering_is_plain_substitution() {
        let t = PromptTemplate::new("Q: {{q}} / {{q}} {x}");
        assert_eq!(t.placeholders().unwrap(), ["q", "q"]);
        let r = record([("q", "a{{b}}\\n")]);
        assert_eq!(t.render(&r).unwrap(), "Q: a{{b}}\\n / a{{b}}\\n {x}");
        assert!(PromptTemplate::new("{{open").placeholders().is_err());
        assert!(PromptTemplate::new("{{}}").placeholders().is_err());
        assert!(t.validate(&["other".to_string()]).is_err());
    }

    #[test]
    fn few_shot_layout() {
        let ex = |i: &str, o: &str| (record([("x", i)]), o.to_string());
        let t = PromptTemplate::new("{{x}}").with_examples(vec![ex("2", "4"), ex("3", "6")]);
        assert_eq!(t.render_prompt(&record([("x", "5")])).unwrap(), "2\n###\n4\n###\n3\n###\n6\n###\n5");
        assert_eq!(
            crate::model::mock_completion("mock-model-1", None, &t.render_prompt(&record([("x", "5")])).unwrap(), &GenerationConfig::default()),
            "MOCK:94c884a9d823c7a0"
        );
    }

    #[test]
    fn uncacheable_map_is_refused() {
        let op = MapOp {
            f: Arc::new(|r: &Record| r.clone()),
            out_columns: vec!["t".into()],
            logic_key: None,
        };
        assert!(op.args().is_none());
    }
}
