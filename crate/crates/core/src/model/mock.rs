use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{GenerationConfig, GenerationRequest, ModelRef, Provider};
use crate::error::{Error, ErrorClass, Result};
use crate::fingerprint::canonical_bytes;

pub const MOCK_EMBEDDING_DIM: usize = 16;

/// `"MOCK:"` + the first 16 hex chars of
/// SHA-256(model_id ␟ system_prompt ␟ prompt ␟ canonical(cfg)).
pub fn mock_completion(model_id: &str, system_prompt: Option<&str>, prompt: &str, cfg: &GenerationConfig) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update(b"\x1f");
    h.update(system_prompt.unwrap_or("").as_bytes());
    h.update(b"\x1f");
    h.update(prompt.as_bytes());
    h.update(b"\x1f");
    h.update(canonical_bytes(&cfg.to_canonical()).expect("config is flat"));
    let digest = hex::encode(h.finalize());
    format!("MOCK:{}", &digest[..16])
}

/// Component j is byte j of SHA-256(text), scaled to [0, 1].
pub fn mock_embedding(text: &str) -> Vec<f64> {
    let digest = Sha256::digest(text.as_bytes());
    digest[..MOCK_EMBEDDING_DIM].iter().map(|b| f64::from(*b) / 255.0).collect()
}

/// Deterministic offline provider. Counts calls and can inject latency,
/// failures after a number of successful calls, or a hard process abort.
#[derive(Debug, Default)]
pub struct MockProvider {
    calls: AtomicU64,
    delay: Duration,
    fail_after: Option<u64>,
    abort_after: Option<u64>,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Calls beyond the first `n` fail with a non-retryable bad-request error.
    pub fn failing_after(mut self, n: u64) -> Self {
        self.fail_after = Some(n);
        self
    }

    /// The call after the first `n` aborts the whole process.
    pub fn aborting_after(mut self, n: u64) -> Self {
        self.abort_after = Some(n);
        self
    }

    /// Calls that reached this provider, including failed ones.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn enter(&self) -> Result<()> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.abort_after.is_some_and(|limit| n >= limit) {
            std::process::abort();
        }
        if self.fail_after.is_some_and(|limit| n >= limit) {
            return Err(Error::Provider {
                provider: super::MOCK_PROVIDER.into(),
                class: ErrorClass::BadRequest,
                message: format!("injected failure on call {}", n + 1),
            });
        }
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        Ok(())
    }
}

impl Provider for MockProvider {
    fn generate(&self, model: &ModelRef, request: &GenerationRequest<'_>) -> Result<String> {
        self.enter()?;
        Ok(mock_completion(&model.model_id, request.system_prompt, request.prompt, request.config))
    }

    fn embed(&self, _model: &ModelRef, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.enter()?;
        Ok(texts.iter().map(|t| mock_embedding(t)).collect())
    }
}
