use std::sync::OnceLock;
use std::time::Duration;

use serde_json::{json, Value as Json};

use super::retry::{retry_policy, RetryDecision, BASE_DELAY};
use super::{GenerationRequest, ModelRef, Provider, HTTP_PROVIDER};
use crate::error::{Error, ErrorClass, Result};

/// Client for OpenAI-compatible `/v1/chat/completions` and `/v1/embeddings`
/// endpoints, with exponential backoff on retryable failures.
pub struct OpenAiCompatProvider {
    client: OnceLock<reqwest::blocking::Client>,
    retry_unit: Duration,
    timeout: Duration,
}

impl Default for OpenAiCompatProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl OpenAiCompatProvider {
    pub fn new() -> Self {
        OpenAiCompatProvider {
            client: OnceLock::new(),
            retry_unit: BASE_DELAY,
            timeout: Duration::from_secs(120),
        }
    }

    /// Scales every backoff delay so that one policy second lasts `unit`.
    pub fn with_retry_unit(mut self, unit: Duration) -> Self {
        self.retry_unit = unit;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .expect("TLS backend initializes")
        })
    }

    fn post(&self, model: &ModelRef, path: &str, body: &Json) -> Result<Json> {
        let key = std::env::var(&model.api_key_env).map_err(|_| Error::AuthMissing(model.api_key_env.clone()))?;
        let url = format!("{}{}", model.endpoint.trim_end_matches('/'), path);
        let mut rng = rand::thread_rng();
        let mut attempt = 1;
        loop {
            let err = match self.client().post(&url).bearer_auth(&key).json(body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<Json>().map_err(|e| provider_error(ErrorClass::BadResponse, e));
                    }
                    let class = match status.as_u16() {
                        429 => ErrorClass::RateLimited,
                        401 | 403 => ErrorClass::Auth,
                        s if s >= 500 => ErrorClass::ServerError,
                        _ => ErrorClass::BadRequest,
                    };
                    let text = resp.text().unwrap_or_default();
                    provider_error(class, format!("HTTP {status}: {text}"))
                }
                Err(e) => provider_error(ErrorClass::Network, e),
            };
            let Error::Provider { class, .. } = &err else { unreachable!() };
            match retry_policy(attempt, *class, &mut rng) {
                RetryDecision::GiveUp => return Err(err),
                RetryDecision::Retry(delay) => {
                    std::thread::sleep(delay.mul_f64(self.retry_unit.as_secs_f64() / BASE_DELAY.as_secs_f64()));
                    attempt += 1;
                }
            }
        }
    }
}

fn provider_error(class: ErrorClass, message: impl ToString) -> Error {
    Error::Provider {
        provider: HTTP_PROVIDER.into(),
        class,
        message: message.to_string(),
    }
}

impl Provider for OpenAiCompatProvider {
    fn generate(&self, model: &ModelRef, request: &GenerationRequest<'_>) -> Result<String> {
        let mut messages = Vec::new();
        if let Some(system) = request.system_prompt {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.prompt}));
        let cfg = request.config;
        let mut body = json!({
            "model": model.model_id,
            "messages": messages,
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        });
        if let Some(seed) = cfg.seed {
            body["seed"] = json!(seed);
        }
        if let Some(stop) = &cfg.stop {
            body["stop"] = json!(stop);
        }
        let resp = self.post(model, "/v1/chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Json::as_str)
            .map(str::to_string)
            .ok_or_else(|| provider_error(ErrorClass::BadResponse, "missing choices[0].message.content"))
    }

    fn embed(&self, model: &ModelRef, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({"model": model.model_id, "input": texts});
        let resp = self.post(model, "/v1/embeddings", &body)?;
        let data = resp
            .get("data")
            .and_then(Json::as_array)
            .ok_or_else(|| provider_error(ErrorClass::BadResponse, "missing data"))?;
        let mut out: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
        for (i, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Json::as_u64).unwrap_or(i as u64);
            let vector = item
                .get("embedding")
                .and_then(Json::as_array)
                .and_then(|v| v.iter().map(Json::as_f64).collect::<Option<Vec<f64>>>())
                .ok_or_else(|| provider_error(ErrorClass::BadResponse, "bad embedding"))?;
            out.push((index, vector));
        }
        out.sort_by_key(|(i, _)| *i);
        Ok(out.into_iter().map(|(_, v)| v).collect())
    }
}
