//! Uniform access to generation and embedding providers.
//!
//! Providers implement [`Provider`] and are registered by name in a
//! [`ProviderRegistry`]; a [`ModelRef`] selects one through its `provider`
//! field, so swapping one model for another is a data change, not a code
//! change. Every call goes through the session's [`PromptCache`] first.

mod cache;
mod http;
mod mock;
mod retry;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;

use serde::{Deserialize, Serialize};

pub use cache::{cache_jsonl_line, parse_cache_jsonl, CacheEntry, PromptCache};
pub use http::OpenAiCompatProvider;
pub use mock::{mock_completion, mock_embedding, MockProvider, MOCK_EMBEDDING_DIM};
pub use retry::{retry_policy, ErrorClass, RetryDecision, BASE_DELAY, MAX_ATTEMPTS};

use crate::error::{Error, Result};
use crate::fingerprint::{tagged_float, CanonicalValue, Fingerprint, NodeDescriptor};

pub const MOCK_PROVIDER: &str = "mock";
pub const HTTP_PROVIDER: &str = "http_openai_compat";
pub const DEFAULT_API_KEY_ENV: &str = "DREAMFORGE_API_KEY_OPENAI";
pub const MODEL_NODE_VERSION: u32 = 1;

/// Identifies a model. Only `provider`, `endpoint` and `model_id` enter the
/// model's fingerprint; license and citation are carried into cards.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub api_key_env: String,
    pub citation: Option<String>,
    pub endpoint: String,
    pub license: Option<String>,
    pub model_id: String,
    pub provider: String,
}

impl ModelRef {
    pub fn mock(model_id: impl Into<String>) -> Self {
        ModelRef {
            api_key_env: String::new(),
            citation: None,
            endpoint: String::new(),
            license: None,
            model_id: model_id.into(),
            provider: MOCK_PROVIDER.into(),
        }
    }

    pub fn openai_compatible(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        ModelRef {
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            citation: None,
            endpoint: endpoint.into(),
            license: None,
            model_id: model_id.into(),
            provider: HTTP_PROVIDER.into(),
        }
    }

    pub fn with_provider(mut self, provider: impl Into<String>) -> Self {
        self.provider = provider.into();
        self
    }

    pub fn with_license(mut self, license: impl Into<String>) -> Self {
        self.license = Some(license.into());
        self
    }

    pub fn with_citation(mut self, citation: impl Into<String>) -> Self {
        self.citation = Some(citation.into());
        self
    }

    pub fn with_api_key_env(mut self, var: impl Into<String>) -> Self {
        self.api_key_env = var.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.is_empty() {
            return Err(Error::InvalidModel("model_id is empty".into()));
        }
        if self.provider == HTTP_PROVIDER {
            let url = reqwest::Url::parse(&self.endpoint)
                .map_err(|e| Error::InvalidModel(format!("endpoint `{}`: {e}", self.endpoint)))?;
            if !url.has_host() {
                return Err(Error::InvalidModel(format!("endpoint `{}` has no host", self.endpoint)));
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> NodeDescriptor {
        let args = BTreeMap::from([
            ("endpoint".to_string(), CanonicalValue::Text(self.endpoint.clone())),
            ("model_id".to_string(), CanonicalValue::Text(self.model_id.clone())),
            ("provider".to_string(), CanonicalValue::Text(self.provider.clone())),
        ]);
        NodeDescriptor::new("model", MODEL_NODE_VERSION, args, Vec::new())
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.descriptor().fingerprint().expect("model descriptor is flat")
    }
}

/// Sampling configuration. Every field is part of the cache key and of the
/// fingerprint of any step that uses it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub stop: Option<Vec<String>>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.0,
            max_tokens: 256,
            seed: None,
            stop: None,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::InvalidValue(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidValue("max_tokens must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_canonical(&self) -> CanonicalValue {
        CanonicalValue::map([
            ("max_tokens", CanonicalValue::from(self.max_tokens)),
            ("seed", CanonicalValue::from(self.seed)),
            ("stop", CanonicalValue::from(self.stop.clone())),
            ("temperature", CanonicalValue::Float(self.temperature)),
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    /// Cache misses call the provider.
    #[default]
    Live,
    /// Cache misses are errors; the provider is never called.
    Replay,
}

pub struct GenerationRequest<'a> {
    pub system_prompt: Option<&'a str>,
    pub prompt: &'a str,
    pub config: &'a GenerationConfig,
}

/// A model backend. Implementations are registered by name.
pub trait Provider: Send + Sync {
    fn generate(&self, model: &ModelRef, request: &GenerationRequest<'_>) -> Result<String>;

    fn embed(&self, model: &ModelRef, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

struct RegistryInner {
    providers: RwLock<BTreeMap<String, Arc<dyn Provider>>>,
    transport_calls: AtomicU64,
    disabled: AtomicBool,
}

/// Name → provider table plus a counter of every call that reached a
/// provider (cache hits never do).
#[derive(Clone)]
pub struct ProviderRegistry {
    inner: Arc<RegistryInner>,
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        ProviderRegistry {
            inner: Arc::new(RegistryInner {
                providers: RwLock::new(BTreeMap::new()),
                transport_calls: AtomicU64::new(0),
                disabled: AtomicBool::new(false),
            }),
        }
    }

    /// Registry with the built-in `mock` and `http_openai_compat` providers.
    pub fn with_defaults() -> Self {
        let reg = Self::empty();
        reg.register(MOCK_PROVIDER, Arc::new(MockProvider::new()));
        reg.register(HTTP_PROVIDER, Arc::new(OpenAiCompatProvider::new()));
        reg
    }

    pub fn register(&self, name: &str, provider: Arc<dyn Provider>) {
        self.inner.providers.write().expect("registry poisoned").insert(name.to_string(), provider);
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.providers.read().expect("registry poisoned").keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Provider>> {
        self.inner
            .providers
            .read()
            .expect("registry poisoned")
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownProvider(name.to_string()))
    }

    pub fn transport_calls(&self) -> u64 {
        self.inner.transport_calls.load(Ordering::SeqCst)
    }

    /// Makes every provider call fail with [`Error::TransportDisabled`].
    pub fn disable_transport(&self) {
        self.inner.disabled.store(true, Ordering::SeqCst);
    }

    pub fn enable_transport(&self) {
        self.inner.disabled.store(false, Ordering::SeqCst);
    }

    fn provider_for_call(&self, model: &ModelRef) -> Result<Arc<dyn Provider>> {
        if self.inner.disabled.load(Ordering::SeqCst) {
            return Err(Error::TransportDisabled);
        }
        let provider = self.get(&model.provider)?;
        self.inner.transport_calls.fetch_add(1, Ordering::SeqCst);
        Ok(provider)
    }
}

/// Cache key and pre-image for one generation.
pub fn generation_key(
    model: &ModelRef,
    system_prompt: Option<&str>,
    prompt: &str,
    config: &GenerationConfig,
) -> (Fingerprint, CanonicalValue) {
    let node = CanonicalValue::map([
        ("config", config.to_canonical()),
        ("model", CanonicalValue::Fp(model.fingerprint())),
        ("op", CanonicalValue::from("generate")),
        ("prompt", CanonicalValue::from(prompt)),
        ("system_prompt", CanonicalValue::from(system_prompt.map(str::to_string))),
    ]);
    let fp = crate::fingerprint::fingerprint(&node).expect("generation key is canonicalizable");
    (fp, node)
}

pub fn embedding_key(model: &ModelRef, text: &str) -> (Fingerprint, CanonicalValue) {
    let node = CanonicalValue::map([
        ("model", CanonicalValue::Fp(model.fingerprint())),
        ("op", CanonicalValue::from("embed")),
        ("text", CanonicalValue::from(text)),
    ]);
    let fp = crate::fingerprint::fingerprint(&node).expect("embedding key is canonicalizable");
    (fp, node)
}

fn encode_vector(v: &[f64]) -> String {
    let list = CanonicalValue::List(v.iter().map(|x| CanonicalValue::Text(tagged_float(*x))).collect());
    list.to_canonical_string().expect("flat list")
}

fn decode_vector(s: &str) -> Result<Vec<f64>> {
    match CanonicalValue::from_json_str(s)? {
        CanonicalValue::List(items) => items
            .iter()
            .map(|i| i.as_f64().ok_or_else(|| Error::malformed("cached embedding", s)))
            .collect(),
        _ => Err(Error::malformed("cached embedding", s)),
    }
}

/// Cache-aware front end over a provider registry.
#[derive(Clone)]
pub struct ModelClient {
    providers: ProviderRegistry,
    cache: Arc<PromptCache>,
    mode: Mode,
}

/// Results of a batch together with the cache key of every item.
pub struct BatchOutput {
    pub texts: Vec<String>,
    pub keys: Vec<Fingerprint>,
}

impl ModelClient {
    pub fn new(providers: ProviderRegistry, cache: Arc<PromptCache>, mode: Mode) -> Self {
        ModelClient { providers, cache, mode }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn cache(&self) -> &PromptCache {
        &self.cache
    }

    pub fn providers(&self) -> &ProviderRegistry {
        &self.providers
    }

    pub fn generate(
        &self,
        model: &ModelRef,
        system_prompt: Option<&str>,
        prompt: &str,
        config: &GenerationConfig,
    ) -> Result<String> {
        let items = [(system_prompt.map(str::to_string), prompt.to_string())];
        Ok(self.generate_batch(model, &items, config, 1)?.texts.remove(0))
    }

    /// Generates for every `(system_prompt, prompt)` item with up to
    /// `in_flight` concurrent provider calls. Duplicate items share one call;
    /// every successful call is cached immediately, so a failure part-way
    /// through loses nothing already paid for.
    pub fn generate_batch(
        &self,
        model: &ModelRef,
        items: &[(Option<String>, String)],
        config: &GenerationConfig,
        in_flight: usize,
    ) -> Result<BatchOutput> {
        model.validate()?;
        config.validate()?;
        if let Some(i) = items.iter().position(|(_, p)| p.is_empty()) {
            return Err(Error::InvalidValue(format!("prompt {i} is empty")));
        }
        let keyed: Vec<(Fingerprint, CanonicalValue)> = items
            .iter()
            .map(|(s, p)| generation_key(model, s.as_deref(), p, config))
            .collect();

        let mut done: HashMap<Fingerprint, String> = HashMap::new();
        let mut misses: Vec<usize> = Vec::new();
        for (i, (key, _)) in keyed.iter().enumerate() {
            if done.contains_key(key) || misses.iter().any(|&m| keyed[m].0 == *key) {
                continue;
            }
            match self.cache.get(key)? {
                Some(v) => {
                    done.insert(*key, v);
                }
                None => misses.push(i),
            }
        }
        if let Some(&first) = misses.first() {
            if self.mode == Mode::Replay {
                return Err(Error::ReplayMiss(keyed[first].0));
            }
        }

        if !misses.is_empty() {
            let next = AtomicUsize::new(0);
            let failed = AtomicBool::new(false);
            let first_error: Mutex<Option<Error>> = Mutex::new(None);
            let fetched: Mutex<Vec<(Fingerprint, String)>> = Mutex::new(Vec::new());
            let workers = in_flight.max(1).min(misses.len());
            thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        if failed.load(Ordering::SeqCst) {
                            break;
                        }
                        let slot = next.fetch_add(1, Ordering::SeqCst);
                        let Some(&i) = misses.get(slot) else { break };
                        let (system, prompt) = &items[i];
                        let (key, node) = &keyed[i];
                        let request = GenerationRequest {
                            system_prompt: system.as_deref(),
                            prompt,
                            config,
                        };
                        let result = self
                            .providers
                            .provider_for_call(model)
                            .and_then(|p| p.generate(model, &request))
                            .and_then(|text| self.cache.insert(key, &text, Some(node)));
                        match result {
                            Ok(text) => fetched.lock().expect("poisoned").push((*key, text)),
                            Err(e) => {
                                failed.store(true, Ordering::SeqCst);
                                first_error.lock().expect("poisoned").get_or_insert(e);
                                break;
                            }
                        }
                    });
                }
            });
            if let Some(e) = first_error.into_inner().expect("poisoned") {
                return Err(e);
            }
            done.extend(fetched.into_inner().expect("poisoned"));
        }

        let texts = keyed.iter().map(|(k, _)| done[k].clone()).collect();
        Ok(BatchOutput {
            texts,
            keys: keyed.into_iter().map(|(k, _)| k).collect(),
        })
    }

    /// One vector per text. Uncached texts go to the provider in a single
    /// deduplicated call.
    pub fn embed(&self, model: &ModelRef, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        model.validate()?;
        let keyed: Vec<(Fingerprint, CanonicalValue)> = texts.iter().map(|t| embedding_key(model, t)).collect();
        let mut done: HashMap<Fingerprint, Vec<f64>> = HashMap::new();
        let mut misses: Vec<usize> = Vec::new();
        for (i, (key, _)) in keyed.iter().enumerate() {
            if done.contains_key(key) || misses.iter().any(|&m| keyed[m].0 == *key) {
                continue;
            }
            match self.cache.get(key)? {
                Some(v) => {
                    done.insert(*key, decode_vector(&v)?);
                }
                None => misses.push(i),
            }
        }
        if !misses.is_empty() {
            if self.mode == Mode::Replay {
                return Err(Error::ReplayMiss(keyed[misses[0]].0));
            }
            let batch: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.providers.provider_for_call(model)?.embed(model, &batch)?;
            if vectors.len() != batch.len() {
                return Err(Error::Provider {
                    provider: model.provider.clone(),
                    class: ErrorClass::BadResponse,
                    message: format!("{} vectors for {} texts", vectors.len(), batch.len()),
                });
            }
            for (&i, v) in misses.iter().zip(vectors) {
                let (key, node) = &keyed[i];
                let stored = self.cache.insert(key, &encode_vector(&v), Some(node))?;
                done.insert(*key, decode_vector(&stored)?);
            }
        }
        Ok(keyed.iter().map(|(k, _)| done[k].clone()).collect())
    }
}
