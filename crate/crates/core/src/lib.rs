//! Content-addressed, resumable workflow engine for model-in-the-loop data
//! pipelines.
//!
//! A [`Session`] owns an output folder. Steps transform datasets, trainers
//! turn datasets into model artifacts, and every node is addressed by a
//! [`Fingerprint`] over its kind, version, arguments and input fingerprints.
//! Re-running a workflow loads every unchanged node from disk; model calls
//! are memoized in a per-session prompt cache so a shared session folder can
//! be replayed without access to the original model provider.

pub mod cli;
pub mod dataset;
pub mod demo;
mod error;
pub mod fingerprint;
mod fsutil;
pub mod model;
pub mod provenance;
pub mod rng;
pub mod session;
pub mod step;
pub mod trainer;

pub use dataset::{Dataset, Record, Value};
pub use error::{Error, Result};
pub use fingerprint::{CanonicalValue, Fingerprint, NodeDescriptor};
pub use model::{GenerationConfig, Mode, ModelRef, ProviderRegistry};
pub use provenance::Card;
pub use session::{LogLevel, Session, SessionOptions, Status};
pub use step::{PromptTemplate, StepRecord};
pub use trainer::{ToyHyperparams, TrainerRecord, TrainerRegistry};
