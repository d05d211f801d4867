//! Trainers: nodes that turn a dataset into a model artifact, with
//! checkpoints, resume, fingerprints and cards.
//!
//! Trainer kinds are registered by name in a [`TrainerRegistry`]. The
//! built-in `toy-text-classifier` is multinomial logistic regression over
//! hashed bag-of-words features, trained by sequential float64 SGD so that
//! its weights are byte-reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use crate::dataset::{Dataset, Value};
use crate::error::{Error, IoContext, Result};
use crate::fingerprint::{CanonicalValue, Fingerprint, NodeDescriptor};
use crate::fsutil::{now_rfc3339, write_atomic};
use crate::rng::SplitMix64;
use crate::session::{LogLevel, NodeFolder, Session, Status};
use crate::step::{
    panic_message, prepare_node_dir, Prior, StatusFile, StepRecord, CARD_JSON, CARD_MD, FINGERPRINT_FILE,
};

pub const TOY_KIND: &str = "toy-text-classifier";
pub const TOY_DIM: usize = 1 << 16;
pub const MODEL_DIR: &str = "model";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const MAGIC: &[u8; 4] = b"DFWT";
const WEIGHTS_FORMAT: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Sorted, deduplicated feature indices of the lowercased whitespace tokens.
pub fn features(text: &str, dim: usize) -> Vec<usize> {
    let mut f: Vec<usize> = text
        .split_whitespace()
        .map(|t| (fnv1a64(t.to_lowercase().as_bytes()) % dim as u64) as usize)
        .collect();
    f.sort_unstable();
    f.dedup();
    f
}

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// `exp` built only from IEEE-754 basic operations, so every platform
/// rounds identically (libm implementations differ in the last bit).
pub fn det_exp(x: f64) -> f64 {
    if x < -708.0 {
        return 0.0;
    }
    if x.is_nan() {
        return x;
    }
    let k = (x * LOG2E + 0.5).floor();
    let r = x - k * LN2_HI - k * LN2_LO;
    // Taylor series to degree 13, Horner form.
    let mut inv_fact = [1.0f64; 14];
    for n in 1..14 {
        inv_fact[n] = inv_fact[n - 1] / n as f64;
    }
    let mut p = inv_fact[13];
    for n in (0..13).rev() {
        p = p * r + inv_fact[n];
    }
    p * pow2(k as i32)
}

fn pow2(k: i32) -> f64 {
    if (-1022..=1023).contains(&k) {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        2f64.powi(k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub classes: Vec<String>,
    pub dim: usize,
    /// Row-major `classes × dim`.
    pub weights: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(classes: Vec<String>, dim: usize) -> Self {
        let weights = vec![0.0; classes.len() * dim];
        ToyModel { classes, dim, weights }
    }

    /// Weights drawn uniformly from `[-0.005, 0.005)`, class by class.
    /// Returns the generator state after initialization.
    pub fn init(classes: Vec<String>, dim: usize, seed: u64) -> (Self, SplitMix64) {
        let mut rng = SplitMix64::new(seed);
        let weights = (0..classes.len() * dim).map(|_| (rng.next_f64() - 0.5) * 0.01).collect();
        (ToyModel { classes, dim, weights }, rng)
    }

    fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.dim..(c + 1) * self.dim]
    }

    pub fn logits(&self, feats: &[usize]) -> Vec<f64> {
        (0..self.classes.len())
            .map(|c| {
                let row = self.row(c);
                let mut s = 0.0;
                for &f in feats {
                    s += row[f];
                }
                s
            })
            .collect()
    }

    pub fn probabilities(&self, feats: &[usize]) -> Vec<f64> {
        softmax(&self.logits(feats))
    }

    /// Most likely label (ties go to the earlier class) and per-class scores.
    pub fn predict(&self, text: &str) -> (String, BTreeMap<String, f64>) {
        let feats = features(text, self.dim);
        let z = self.logits(&feats);
        let mut best = 0;
        for (c, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = c;
            }
        }
        let scores = self.classes.iter().cloned().zip(softmax(&z)).collect();
        (self.classes[best].clone(), scores)
    }

    /// Cross-entropy loss `-ln p_y` and its gradient with respect to every
    /// weight, laid out like `weights`.
    pub fn loss_and_gradient(&self, feats: &[usize], y: usize) -> (f64, Vec<f64>) {
        let p = self.probabilities(feats);
        let mut grad = vec![0.0; self.weights.len()];
        for (c, pc) in p.iter().enumerate() {
            let g = pc - if c == y { 1.0 } else { 0.0 };
            for &f in feats {
                grad[c * self.dim + f] += g;
            }
        }
        (-p[y].ln(), grad)
    }

    /// One SGD update on a single example.
    pub fn sgd_step(&mut self, feats: &[usize], y: usize, lr: f64) {
        let p = self.probabilities(feats);
        for (c, pc) in p.iter().enumerate() {
            let step = lr * (pc - if c == y { 1.0 } else { 0.0 });
            let row = &mut self.weights[c * self.dim..(c + 1) * self.dim];
            for &f in feats {
                row[f] -= step;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.weights.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&WEIGHTS_FORMAT.to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&(c.len() as u32).to_le_bytes());
            out.extend_from_slice(c.as_bytes());
        }
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Parses a model prefix of `bytes`; returns it with the bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(ToyModel, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::malformed("weights", "bad magic"));
        }
        let format = r.u32()?;
        if format != WEIGHTS_FORMAT {
            return Err(Error::malformed("weights", format!("unsupported format {format}")));
        }
        let n = r.u32()? as usize;
        let mut classes = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?).map_err(|e| Error::malformed("weights", e))?;
            classes.push(s.to_string());
        }
        let dim = r.u32()? as usize;
        let count = n
            .checked_mul(dim)
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::malformed("weights", "truncated"))?;
        let raw = r.take(count * 8)?;
        let weights = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((ToyModel { classes, dim, weights }, r.pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ToyModel> {
        let (model, used) = Self::parse(bytes)?;
        if used != bytes.len() {
            return Err(Error::malformed("weights", "trailing bytes"));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<ToyModel> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| det_exp(v - m)).collect();
    let mut total = 0.0;
    for v in &e {
        total += v;
    }
    e.iter().map(|v| v / total).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::malformed("weights", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    /// Training records processed so far, across epochs.
    pub record_index: u64,
    pub model: ToyModel,
    pub rng_state: u64,
    /// Content hash of the training dataset.
    pub dataset_fingerprint: Fingerprint,
}

impl Checkpoint {
    pub fn file_name(record_index: u64) -> String {
        format!("ckpt-{record_index:08}.bin")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.model.to_bytes();
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.record_index.to_le_bytes());
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(self.dataset_fingerprint.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let (model, used) = ToyModel::parse(bytes)?;
        let mut r = Reader { bytes, pos: used };
        let epoch = r.u32()?;
        let record_index = r.u64()?;
        let rng_state = r.u64()?;
        let fp: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if r.pos != bytes.len() {
            return Err(Error::malformed("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint {
            epoch,
            record_index,
            model,
            rng_state,
            dataset_fingerprint: Fingerprint::from_bytes(fp),
        })
    }
}

/// Checkpoint files in `dir`, newest first. Unreadable files come back as
/// errors so callers can warn about them.
pub fn scan_checkpoints(dir: &Path) -> Result<Vec<(PathBuf, Result<Checkpoint>)>> {
    let mut paths = Vec::new();
    match fs::read_dir(dir) {
        Ok(entries) => {
            for e in entries {
                let path = e.at(dir)?.path();
                let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                if name.starts_with("ckpt-") && name.ends_with(".bin") {
                    paths.push(path);
                }
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::Io { path: dir.to_path_buf(), source: e }),
    }
    paths.sort();
    paths.reverse();
    Ok(paths
        .into_iter()
        .map(|p| {
            let parsed = fs::read(&p).at(&p).and_then(|b| Checkpoint::from_bytes(&b));
            (p, parsed)
        })
        .collect())
}

/// The newest readable checkpoint, if any. A checkpoint written for a
/// dataset other than `input_fp` is a `CheckpointMismatch`.
pub fn resume_from_checkpoint(dir: &Path, input_fp: &Fingerprint) -> Result<Option<Checkpoint>> {
    let newest = scan_checkpoints(dir)?.into_iter().find_map(|(_, c)| c.ok());
    match newest {
        Some(c) if c.dataset_fingerprint != *input_fp => Err(Error::CheckpointMismatch {
            expected: *input_fp,
            found: c.dataset_fingerprint,
        }),
        other => Ok(other),
    }
}

/// A node that trains on one step's dataset.
pub trait Trainer: Send + Sync {
    fn kind(&self) -> &str;

    fn version(&self) -> u32 {
        1
    }

    /// Fingerprinted hyperparameters.
    fn args(&self) -> BTreeMap<String, CanonicalValue>;

    fn license(&self) -> Option<String> {
        None
    }

    fn citation(&self) -> Option<String> {
        None
    }

    /// Rejects unusable input before anything is written.
    fn validate(&self, input: &Dataset) -> Result<()>;

    /// Whether a completed run's artifact in `dir` is intact.
    fn artifact_valid(&self, dir: &Path) -> bool {
        dir.join(MODEL_DIR).is_dir()
    }

    fn train(&self, ctx: &mut TrainerContext<'_>) -> Result<()>;
}

pub struct TrainerContext<'a> {
    session: &'a Session,
    name: &'a str,
    dir: &'a Path,
    input: Dataset,
    input_hash: Fingerprint,
}

impl TrainerContext<'_> {
    pub fn session(&self) -> &Session {
        self.session
    }

    pub fn input(&self) -> &Dataset {
        &self.input
    }

    /// Content hash of the training dataset.
    pub fn input_hash(&self) -> Fingerprint {
        self.input_hash
    }

    pub fn model_dir(&self) -> PathBuf {
        self.dir.join(MODEL_DIR)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_DIR)
    }

    pub fn log(&self, level: LogLevel, message: &str) {
        self.session.log(level, Some(self.name), message);
    }
}

pub type TrainerFactory = Arc<dyn Fn(&BTreeMap<String, CanonicalValue>) -> Result<Box<dyn Trainer>> + Send + Sync>;

/// Trainer kinds by name.
#[derive(Clone)]
pub struct TrainerRegistry {
    factories: Arc<RwLock<BTreeMap<String, TrainerFactory>>>,
}

impl Default for TrainerRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl TrainerRegistry {
    pub fn empty() -> Self {
        TrainerRegistry {
            factories: Arc::new(RwLock::new(BTreeMap::new())),
        }
    }

    pub fn with_defaults() -> Self {
        let reg = Self::empty();
        reg.register(TOY_KIND, Arc::new(|args| Ok(Box::new(ToyTrainer::from_args(args)?) as Box<dyn Trainer>)));
        reg
    }

    pub fn register(&self, kind: &str, factory: TrainerFactory) {
        self.factories.write().expect("registry poisoned").insert(kind.to_string(), factory);
    }

    pub fn kinds(&self) -> Vec<String> {
        self.factories.read().expect("registry poisoned").keys().cloned().collect()
    }

    pub fn create(&self, kind: &str, args: &BTreeMap<String, CanonicalValue>) -> Result<Box<dyn Trainer>> {
        let factory = self
            .factories
            .read()
            .expect("registry poisoned")
            .get(kind)
            .cloned()
            .ok_or_else(|| Error::UnknownTrainer(kind.to_string()))?;
        factory(args)
    }
}

#[derive(Clone, Debug)]
pub struct TrainerRecord {
    pub name: String,
    pub kind: String,
    pub version: u32,
    pub args: BTreeMap<String, CanonicalValue>,
    pub input: Fingerprint,
    pub fingerprint: Fingerprint,
    pub status: Status,
    pub artifact_dir: PathBuf,
}

impl TrainerRecord {
    pub fn weights_path(&self) -> PathBuf {
        self.artifact_dir.join(MODEL_DIR).join(WEIGHTS_FILE)
    }

    pub fn descriptor(&self) -> NodeDescriptor {
        NodeDescriptor::new(self.kind.clone(), self.version, self.args.clone(), vec![self.input])
    }
}

/// Runs `trainer` on `input` as node `name`, loading a completed artifact
/// with the same fingerprint instead of training again.
pub fn run_trainer(session: &Session, name: &str, trainer: &dyn Trainer, input: &StepRecord) -> Result<TrainerRecord> {
    session.ensure_open()?;
    if !input.status.is_done() {
        return Err(Error::InputNotReady(input.name.clone()));
    }
    let data = input.dataset()?.clone();
    trainer.validate(&data)?;
    let node = NodeDescriptor::new(trainer.kind(), trainer.version(), trainer.args(), vec![input.fingerprint]);
    let (fingerprint, fp_bytes) = node.fingerprint_file()?;
    let name = session.register_step(name, &fingerprint, NodeFolder::Trainers)?;
    let dir = session.node_dir(NodeFolder::Trainers, &name);
    let record = |status| TrainerRecord {
        name: name.clone(),
        kind: node.kind.clone(),
        version: node.version,
        args: node.args.clone(),
        input: input.fingerprint,
        fingerprint,
        status,
        artifact_dir: dir.clone(),
    };

    if let Prior::Same(Some(st)) = prepare_node_dir(session, &name, &dir, &fingerprint)? {
        if st.status.is_done() && trainer.artifact_valid(&dir) {
            if !dir.join(CARD_JSON).exists() || !dir.join(CARD_MD).exists() {
                crate::provenance::write_cards(session.dir(), &dir)?;
            }
            session.set_status(&name, &fingerprint, Status::Cached)?;
            session.log(LogLevel::Info, Some(&name), &format!("loaded trained model ({})", fingerprint.short(12)));
            return Ok(record(Status::Cached));
        }
    }

    fs::create_dir_all(&dir).at(&dir)?;
    write_atomic(&dir.join(FINGERPRINT_FILE), &fp_bytes)?;
    let clock = Instant::now();
    let rows = data.len().unwrap_or(0);
    let mut status = StatusFile {
        citation: trainer.citation(),
        completed_at: None,
        duration_ms: None,
        error: None,
        kind: node.kind.clone(),
        license: trainer.license(),
        models: Vec::new(),
        name: name.clone(),
        progress: 0,
        rows: Some(rows),
        started_at: now_rfc3339(),
        status: Status::Running,
        version: node.version,
    };
    status.write(&dir)?;
    session.set_status(&name, &fingerprint, Status::Running)?;
    session.count_execution(&name);
    session.log(LogLevel::Info, Some(&name), &format!("training {} ({})", node.kind, fingerprint.short(12)));

    let outcome = data.compute_content_hash().and_then(|input_hash| {
        let mut ctx = TrainerContext {
            session,
            name: &name,
            dir: &dir,
            input: data.clone(),
            input_hash,
        };
        catch_unwind(AssertUnwindSafe(|| trainer.train(&mut ctx))).unwrap_or_else(|p| Err(Error::Panicked(panic_message(p))))
    });
    status.duration_ms = Some(clock.elapsed().as_millis() as u64);
    match outcome {
        Ok(()) => {
            status.status = Status::Completed;
            status.completed_at = Some(now_rfc3339());
            status.progress = rows;
            status.write(&dir)?;
            crate::provenance::write_cards(session.dir(), &dir)?;
            session.set_status(&name, &fingerprint, Status::Completed)?;
            session.log(LogLevel::Info, Some(&name), &format!("trained in {} ms", status.duration_ms.unwrap_or(0)));
            Ok(record(Status::Completed))
        }
        Err(err) => {
            status.status = Status::Failed;
            status.error = Some(err.to_string());
            status.write(&dir)?;
            session.set_status(&name, &fingerprint, Status::Failed)?;
            session.log(LogLevel::Error, Some(&name), &format!("failed: {err}"));
            Err(match err {
                e @ (Error::TrainerFailed(_) | Error::CheckpointMismatch { .. } | Error::SessionClosed) => e,
                e => Error::TrainerFailed(e.to_string()),
            })
        }
    }
}

/// Creates a trainer of a registered `kind` from `args` and runs it.
pub fn train(
    session: &Session,
    name: &str,
    kind: &str,
    args: &BTreeMap<String, CanonicalValue>,
    input: &StepRecord,
) -> Result<TrainerRecord> {
    let trainer = session.trainers().create(kind, args)?;
    run_trainer(session, name, trainer.as_ref(), input)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyHyperparams {
    pub lr: f64,
    pub epochs: u32,
    pub seed: u64,
    /// Records between checkpoints; 0 disables checkpointing.
    pub checkpoint_every: u64,
}

impl Default for ToyHyperparams {
    fn default() -> Self {
        ToyHyperparams {
            lr: 0.1,
            epochs: 1,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyTrainer {
    pub text_column: String,
    pub label_column: String,
    pub hp: ToyHyperparams,
    pub dim: usize,
    interrupt_after: Option<u64>,
}

impl ToyTrainer {
    pub fn new(text_column: impl Into<String>, label_column: impl Into<String>, hp: ToyHyperparams) -> Self {
        ToyTrainer {
            text_column: text_column.into(),
            label_column: label_column.into(),
            hp,
            dim: TOY_DIM,
            interrupt_after: None,
        }
    }

    /// Fault injection: fail right after the checkpoint at `records`, as if
    /// the process had been killed there.
    pub fn interrupt_after(mut self, records: u64) -> Self {
        self.interrupt_after = Some(records);
        self
    }

    pub fn from_args(args: &BTreeMap<String, CanonicalValue>) -> Result<Self> {
        let text = |k: &str| {
            args.get(k)
                .and_then(CanonicalValue::as_str)
                .map(str::to_string)
                .ok_or_else(|| Error::InvalidValue(format!("toy trainer needs text arg `{k}`")))
        };
        let uint = |k: &str| {
            args.get(k)
                .and_then(CanonicalValue::as_u64)
                .ok_or_else(|| Error::InvalidValue(format!("toy trainer needs integer arg `{k}`")))
        };
        let lr = args
            .get("lr")
            .and_then(CanonicalValue::as_f64)
            .ok_or_else(|| Error::InvalidValue("toy trainer needs float arg `lr`".into()))?;
        let epochs = u32::try_from(uint("epochs")?).map_err(|_| Error::InvalidValue("epochs too large".into()))?;
        let hp = ToyHyperparams {
            lr,
            epochs,
            seed: uint("seed")?,
            checkpoint_every: uint("checkpoint_every")?,
        };
        Ok(ToyTrainer::new(text("text_column")?, text("label_column")?, hp))
    }

    fn examples(&self, input: &Dataset) -> Result<(Vec<String>, Vec<Vec<usize>>, Vec<usize>)> {
        let mut texts = Vec::new();
        let mut labels = Vec::new();
        for r in input.iter() {
            let r = r?;
            let get = |c: &str| match r.get(c) {
                Some(Value::Text(s)) => Ok(s.clone()),
                Some(other) => Ok(other.render()),
                None => Err(Error::TrainerFailed(format!("missing column `{c}`"))),
            };
            texts.push(get(&self.text_column)?);
            labels.push(get(&self.label_column)?);
        }
        let mut classes = labels.clone();
        classes.sort();
        classes.dedup();
        let feats = texts.iter().map(|t| features(t, self.dim)).collect();
        let ys = labels
            .iter()
            .map(|l| classes.binary_search(l).expect("label is a class"))
            .collect();
        Ok((classes, feats, ys))
    }
}

impl Trainer for ToyTrainer {
    fn kind(&self) -> &str {
        TOY_KIND
    }

    fn args(&self) -> BTreeMap<String, CanonicalValue> {
        BTreeMap::from([
            ("checkpoint_every".to_string(), CanonicalValue::from(self.hp.checkpoint_every)),
            ("epochs".to_string(), CanonicalValue::from(self.hp.epochs)),
            ("label_column".to_string(), CanonicalValue::from(self.label_column.as_str())),
            ("lr".to_string(), CanonicalValue::Float(self.hp.lr)),
            ("seed".to_string(), CanonicalValue::from(self.hp.seed)),
            ("text_column".to_string(), CanonicalValue::from(self.text_column.as_str())),
        ])
    }

    fn validate(&self, input: &Dataset) -> Result<()> {
        for c in [&self.text_column, &self.label_column] {
            if !input.columns().contains(c) {
                return Err(Error::TrainerFailed(format!("input has no column `{c}`")));
            }
        }
        if input.is_empty() {
            return Err(Error::TrainerFailed("training input has no rows".into()));
        }
        if !(self.hp.lr.is_finite() && self.hp.lr > 0.0) {
            return Err(Error::TrainerFailed(format!("learning rate {} must be finite and positive", self.hp.lr)));
        }
        Ok(())
    }

    fn artifact_valid(&self, dir: &Path) -> bool {
        ToyModel::load(&dir.join(MODEL_DIR).join(WEIGHTS_FILE)).is_ok()
    }

    fn train(&self, ctx: &mut TrainerContext<'_>) -> Result<()> {
        let (classes, feats, ys) = self.examples(ctx.input())?;
        if feats.is_empty() {
            return Err(Error::TrainerFailed("training input has no rows".into()));
        }
        let n = feats.len() as u64;
        let total = n * u64::from(self.hp.epochs);
        let ckpt_dir = ctx.checkpoint_dir();

        let mut resumed = None;
        for (path, parsed) in scan_checkpoints(&ckpt_dir)? {
            match parsed {
                Ok(c) => {
                    resumed = Some(c);
                    break;
                }
                Err(e) => ctx.log(LogLevel::Warn, &format!("skipping unreadable checkpoint {}: {e}", path.display())),
            }
        }
        let (mut model, mut record_index, rng_state) = match resumed {
            Some(c) => {
                if c.dataset_fingerprint != ctx.input_hash() {
                    return Err(Error::CheckpointMismatch {
                        expected: ctx.input_hash(),
                        found: c.dataset_fingerprint,
                    });
                }
                if c.model.classes != classes || c.model.dim != self.dim || c.record_index > total {
                    return Err(Error::TrainerFailed("checkpoint does not fit this training run".into()));
                }
                ctx.log(LogLevel::Info, &format!("resuming from checkpoint at record {}", c.record_index));
                (c.model, c.record_index, c.rng_state)
            }
            None => {
                let (m, rng) = ToyModel::init(classes, self.dim, self.hp.seed);
                (m, 0, rng.state())
            }
        };

        while record_index < total {
            let i = (record_index % n) as usize;
            model.sgd_step(&feats[i], ys[i], self.hp.lr);
            record_index += 1;
            if self.hp.checkpoint_every > 0 && record_index % self.hp.checkpoint_every == 0 {
                fs::create_dir_all(&ckpt_dir).at(&ckpt_dir)?;
                let ckpt = Checkpoint {
                    epoch: (record_index / n) as u32,
                    record_index,
                    model: model.clone(),
                    rng_state,
                    dataset_fingerprint: ctx.input_hash(),
                };
                write_atomic(&ckpt_dir.join(Checkpoint::file_name(record_index)), &ckpt.to_bytes())?;
                if self.interrupt_after == Some(record_index) {
                    return Err(Error::TrainerFailed(format!("interrupted after record {record_index}")));
                }
            }
        }
        if model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::TrainerFailed("weights diverged".into()));
        }
        let model_dir = ctx.model_dir();
        fs::create_dir_all(&model_dir).at(&model_dir)?;
        write_atomic(&model_dir.join(WEIGHTS_FILE), &model.to_bytes())
    }
}

pub fn train_toy(
    session: &Session,
    name: &str,
    input: &StepRecord,
    text_column: &str,
    label_column: &str,
    hp: &ToyHyperparams,
) -> Result<TrainerRecord> {
    run_trainer(session, name, &ToyTrainer::new(text_column, label_column, hp.clone()), input)
}
