//! Language-model gateway.
//!
//! One [`Gateway`] fronts a [`Backend`] (remote OpenAI-compatible endpoint or
//! the scripted mock) with a content-addressed response cache and retry with
//! exponential backoff. Callers build an [`LmRequest`], the gateway hashes it,
//! serves it from cache when possible and otherwise forwards it.

mod cache;
pub(crate) mod http;
mod json;
mod keyword;
mod mock;

pub use cache::{CacheRecord, CachedResponse, ResponseCache};
pub use http::{HttpTransport, OpenAiBackend, RateLimiter};
pub use json::{extract_json, JsonParseError};
pub use keyword::{KeywordLearner, KEYWORD_ANSWER_PREFIX};
pub use mock::{prompt_hash, Matcher, MockBackend, MockRule, MockScript};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::domain::content_hash;

/// Upper bound on returned alternatives per token position.
pub const MAX_TOP_K_LOGPROBS: u32 = 20;

/// Seed offset applied per parse-retry attempt so retries are distinct cache keys.
pub const RETRY_SEED_STRIDE: u64 = 1_000_003;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("retryable backend failure: {0}")]
    Retryable(String),
    #[error("fatal backend failure: {0}")]
    Fatal(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Model, sampling temperature and seed for one model role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSettings {
    pub model_id: String,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl CallSettings {
    pub fn new(model_id: impl Into<String>, temperature: f64, seed: u64) -> Self {
        CallSettings {
            model_id: model_id.into(),
            temperature,
            seed,
            max_tokens: 2048,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        CallSettings {
            seed,
            ..self.clone()
        }
    }

    pub fn request(&self, prompt: impl Into<String>) -> LmRequest {
        LmRequest::user(&self.model_id, prompt, self.temperature, self.seed)
            .with_max_tokens(self.max_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub top_k_logprobs: u32,
}

impl LmRequest {
    /// Single user-turn request with logprobs off.
    pub fn user(model_id: &str, prompt: impl Into<String>, temperature: f64, seed: u64) -> Self {
        LmRequest {
            model_id: model_id.to_string(),
            messages: vec![Message::user(prompt)],
            temperature,
            seed,
            max_tokens: 2048,
            want_logprobs: false,
            top_k_logprobs: MAX_TOP_K_LOGPROBS,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_logprobs(mut self, top_k: u32) -> Self {
        self.want_logprobs = true;
        self.top_k_logprobs = top_k;
        self
    }

    /// The same request for the `attempt`-th parse retry.
    pub fn for_attempt(&self, attempt: u32) -> LmRequest {
        let mut r = self.clone();
        r.seed = self
            .seed
            .wrapping_add(u64::from(attempt).wrapping_mul(RETRY_SEED_STRIDE));
        r
    }

    /// All message contents joined by blank lines; what mock matchers see.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Content hash over every field of the request.
    pub fn cache_key(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        content_hash(&["chat", &canonical])
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| LmError::InvalidInput("request has no messages".into()))?;
        if first.role == Role::Assistant {
            return Err(LmError::InvalidInput(
                "first message must be system or user".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LmError::InvalidInput(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LmError::InvalidInput("max_tokens must be positive".into()));
        }
        if !(1..=MAX_TOP_K_LOGPROBS).contains(&self.top_k_logprobs) {
            return Err(LmError::InvalidInput(format!(
                "top_k_logprobs {} outside [1, {MAX_TOP_K_LOGPROBS}]",
                self.top_k_logprobs
            )));
        }
        Ok(())
    }
}

/// Probabilities of the alternatives at one token position (possibly top-k truncated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub token_labels: Vec<String>,
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(token_labels: Vec<String>, probs: Vec<f64>) -> Result<Self, LmError> {
        let d = TokenDistribution {
            token_labels,
            probs,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(k: usize) -> Self {
        TokenDistribution {
            token_labels: (0..k).map(|i| format!("t{i}")).collect(),
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn from_logprobs(entries: impl IntoIterator<Item = (String, f64)>) -> Self {
        let (token_labels, probs) = entries.into_iter().map(|(t, lp)| (t, lp.exp())).unzip();
        TokenDistribution {
            token_labels,
            probs,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.probs.len() != self.token_labels.len() {
            return Err(LmError::InvalidInput(
                "token_labels and probs differ in length".into(),
            ));
        }
        if let Some(p) = self.probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(LmError::InvalidInput(format!(
                "probability {p} outside (0, 1]"
            )));
        }
        let total: f64 = self.probs.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(LmError::InvalidInput(format!(
                "probabilities sum to {total} > 1"
            )));
        }
        Ok(())
    }

    /// Keeps the `k` most probable entries (stable on ties).
    pub fn truncated(&self, k: usize) -> TokenDistribution {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]));
        idx.truncate(k);
        idx.sort_unstable();
        TokenDistribution {
            token_labels: idx.iter().map(|&i| self.token_labels[i].clone()).collect(),
            probs: idx.iter().map(|&i| self.probs[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default)]
    pub first_token_distribution: Option<TokenDistribution>,
}

/// A model provider. Implementations must be safe to call from many threads.
pub trait Backend: Send + Sync {
    /// Stable identity string recorded in run manifests.
    fn identity(&self) -> String;

    fn complete(&self, request: &LmRequest) -> Result<Completion, LmError>;

    fn embed(&self, model_id: &str, text: &str) -> Result<Vec<f64>, LmError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }
}

/// Cached, retrying front door to a [`Backend`].
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: ResponseCache,
    retry: RetryPolicy,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, cache: ResponseCache) -> Self {
        Gateway {
            backend,
            cache,
            retry: RetryPolicy::default(),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// Gateway with an in-memory cache only.
    pub fn in_memory(backend: Arc<dyn Backend>) -> Self {
        Gateway::new(backend, ResponseCache::in_memory())
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_identity(&self) -> String {
        self.backend.identity()
    }

    /// Number of requests forwarded to the backend (including retries).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn complete(&self, request: &LmRequest) -> Result<Completion, LmError> {
        request.validate()?;
        let key = request.cache_key();
        if let Some(CachedResponse::Completion(c)) = self.cache.get(&key)? {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(c);
        }
        let completion = self.with_retries(|| self.backend.complete(request))?;
        let completion = match completion.first_token_distribution {
            Some(d) if request.want_logprobs => Completion {
                first_token_distribution: Some(d.truncated(request.top_k_logprobs as usize)),
                ..completion
            },
            _ => Completion {
                first_token_distribution: None,
                ..completion
            },
        };
        self.cache.put(
            &key,
            serde_json::to_value(request).expect("request serializes"),
            CachedResponse::Completion(completion.clone()),
        )?;
        Ok(completion)
    }

    pub fn embed(&self, model_id: &str, text: &str) -> Result<Vec<f64>, LmError> {
        if text.trim().is_empty() {
            return Err(LmError::InvalidInput("cannot embed empty text".into()));
        }
        let key = content_hash(&["embed", model_id, text]);
        if let Some(CachedResponse::Embedding(v)) = self.cache.get(&key)? {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(v);
        }
        let v = self.with_retries(|| self.backend.embed(model_id, text))?;
        self.cache.put(
            &key,
            json!({"embed": {"model_id": model_id, "text": text}}),
            CachedResponse::Embedding(v.clone()),
        )?;
        Ok(v)
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, LmError>) -> Result<T, LmError> {
        let mut attempt = 0;
        loop {
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match call() {
                Err(LmError::Retryable(msg)) => {
                    attempt += 1;
                    if attempt >= self.retry.max_attempts {
                        return Err(LmError::Retryable(format!(
                            "gave up after {attempt} attempts: {msg}"
                        )));
                    }
                    log::warn!("retrying backend call (attempt {attempt}): {msg}");
                    thread::sleep(self.retry.delay(attempt - 1));
                }
                other => return other,
            }
        }
    }
}

/// Outcome of one parse attempt inside [`retry_parse`].
pub enum Attempt<T> {
    Done(T),
    /// The response was unusable; the message explains why.
    Retry(String),
}

/// Issues `base` up to `max_attempts` times (with per-attempt seeds), feeding
/// each completion to `parse` until it yields a value.
///
/// Returns the last rejection message when every attempt fails.
pub fn retry_parse<T>(
    gateway: &Gateway,
    base: &LmRequest,
    max_attempts: u32,
    mut parse: impl FnMut(&Completion) -> Attempt<T>,
) -> Result<Result<T, String>, LmError> {
    let mut last = String::from("no attempts made");
    for attempt in 0..max_attempts {
        let completion = gateway.complete(&base.for_attempt(attempt))?;
        match parse(&completion) {
            Attempt::Done(v) => return Ok(Ok(v)),
            Attempt::Retry(msg) => {
                log::debug!("attempt {attempt} rejected: {msg}");
                last = msg;
            }
        }
    }
    Ok(Err(last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn script(rules: serde_json::Value) -> Arc<MockBackend> {
        let s: MockScript = serde_json::from_value(json!({ "rules": rules })).unwrap();
        Arc::new(MockBackend::new(s).unwrap())
    }

    fn req(prompt: &str) -> LmRequest {
        LmRequest::user("m", prompt, 0.0, 1)
    }

    #[test]
    fn scripted_echo_by_hash() {
        let r = req("what is six times seven");
        let h = prompt_hash(&r.prompt_text());
        let mock = script(json!([
            {"match": {"hash": h}, "response": "42"},
            {"match": "default", "response": "?"}
        ]));
        let gw = Gateway::in_memory(mock);
        assert_eq!(gw.complete(&r).unwrap().text, "42");
        assert_eq!(gw.complete(&req("other")).unwrap().text, "?");
    }

    #[test]
    fn second_identical_request_is_cached() {
        let mock = script(json!([{"match": "default", "response": "ok"}]));
        let gw = Gateway::in_memory(mock.clone());
        gw.complete(&req("hello")).unwrap();
        gw.complete(&req("hello")).unwrap();
        assert_eq!(mock.calls(), 1);
        assert_eq!(gw.backend_calls(), 1);
        assert_eq!(gw.cache_hits(), 1);
        assert_eq!(gw.cache().len(), 1);
    }

    #[test]
    fn logprobs_from_script() {
        let mock = script(json!([{
            "match": "default",
            "response": "A",
            "logprobs": {"token_labels": ["A","B","C","D"], "probs": [0.25,0.25,0.25,0.25]}
        }]));
        let gw = Gateway::in_memory(mock);
        let c = gw.complete(&req("q").with_logprobs(20)).unwrap();
        assert_eq!(c.first_token_distribution.unwrap().probs, vec![0.25; 4]);
        // not requested -> not returned
        let c = gw.complete(&req("q")).unwrap();
        assert!(c.first_token_distribution.is_none());
    }

    #[test]
    fn logprobs_are_truncated_to_top_k() {
        let mock = script(json!([{
            "match": "default", "response": "A",
            "logprobs": {"token_labels": ["A","B","C"], "probs": [0.2,0.5,0.3]}
        }]));
        let gw = Gateway::in_memory(mock);
        let d = gw
            .complete(&req("q").with_logprobs(2))
            .unwrap()
            .first_token_distribution
            .unwrap();
        assert_eq!(d.token_labels, vec!["B", "C"]);
    }

    #[test]
    fn request_validation() {
        let mut r = req("x");
        r.top_k_logprobs = 21;
        assert!(matches!(r.validate(), Err(LmError::InvalidInput(_))));
        let mut r = req("x");
        r.messages = vec![Message::assistant("hi")];
        assert!(r.validate().is_err());
        let mut r = req("x");
        r.messages.clear();
        assert!(r.validate().is_err());
        let mut r = req("x");
        r.temperature = -1.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn cache_keys_differ_for_every_field_perturbation() {
        let base = LmRequest {
            model_id: "m".into(),
            messages: vec![Message::system("s"), Message::user("u")],
            temperature: 0.0,
            seed: 7,
            max_tokens: 16,
            want_logprobs: false,
            top_k_logprobs: 5,
        };
        let mut variants = vec![base.clone()];
        let mut v = base.clone();
        v.model_id = "n".into();
        variants.push(v);
        let mut v = base.clone();
        v.messages[1].content = "u2".into();
        variants.push(v);
        let mut v = base.clone();
        v.messages[0].role = Role::User;
        variants.push(v);
        let mut v = base.clone();
        v.messages.push(Message::assistant("a"));
        variants.push(v);
        let mut v = base.clone();
        v.messages = vec![Message::system("su")];
        variants.push(v);
        let mut v = base.clone();
        v.temperature = 1.0;
        variants.push(v);
        let mut v = base.clone();
        v.seed = 8;
        variants.push(v);
        let mut v = base.clone();
        v.max_tokens = 17;
        variants.push(v);
        let mut v = base.clone();
        v.want_logprobs = true;
        variants.push(v);
        let mut v = base.clone();
        v.top_k_logprobs = 6;
        variants.push(v);
        let keys: std::collections::BTreeSet<String> =
            variants.iter().map(|r| r.cache_key()).collect();
        assert_eq!(keys.len(), variants.len());
    }

    struct Flaky {
        failures: Mutex<u32>,
        calls: AtomicU64,
        fatal: bool,
    }

    impl Backend for Flaky {
        fn identity(&self) -> String {
            "flaky".into()
        }
        fn complete(&self, _: &LmRequest) -> Result<Completion, LmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fatal {
                return Err(LmError::Fatal("400 bad request".into()));
            }
            let mut f = self.failures.lock().unwrap();
            if *f > 0 {
                *f -= 1;
                return Err(LmError::Retryable("timeout".into()));
            }
            Ok(Completion {
                text: "fine".into(),
                first_token_distribution: None,
            })
        }
        fn embed(&self, _: &str, _: &str) -> Result<Vec<f64>, LmError> {
            Ok(vec![1.0])
        }
    }

    fn flaky(failures: u32, fatal: bool) -> Arc<Flaky> {
        Arc::new(Flaky {
            failures: Mutex::new(failures),
            calls: AtomicU64::new(0),
            fatal,
        })
    }

    #[test]
    fn retryable_errors_are_retried_then_cached_once() {
        let b = flaky(3, false);
        let gw = Gateway::in_memory(b.clone()).with_retry(RetryPolicy::immediate(5));
        assert_eq!(gw.complete(&req("x")).unwrap().text, "fine");
        assert_eq!(b.calls.load(Ordering::SeqCst), 4);
        assert_eq!(gw.cache().len(), 1);
    }

    #[test]
    fn retries_give_up_after_max_attempts() {
        let b = flaky(10, false);
        let gw = Gateway::in_memory(b.clone()).with_retry(RetryPolicy::immediate(5));
        assert!(matches!(gw.complete(&req("x")), Err(LmError::Retryable(_))));
        assert_eq!(b.calls.load(Ordering::SeqCst), 5);
        assert!(gw.cache().is_empty());
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let b = flaky(0, true);
        let gw = Gateway::in_memory(b.clone()).with_retry(RetryPolicy::immediate(5));
        assert!(matches!(gw.complete(&req("x")), Err(LmError::Fatal(_))));
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn embed_rejects_empty_text() {
        let gw = Gateway::in_memory(script(json!([{"match": "default", "response": ""}])));
        assert!(matches!(gw.embed("e", "  "), Err(LmError::InvalidInput(_))));
    }

    #[test]
    fn retry_parse_uses_distinct_seeds() {
        let mock = script(json!([{"match": "default", "response": "nope"}]));
        let gw = Gateway::in_memory(mock.clone());
        let out: Result<(), String> = retry_parse(&gw, &req("x"), 3, |c| {
            Attempt::Retry(format!("bad: {}", c.text))
        })
        .unwrap();
        assert_eq!(out, Err("bad: nope".to_string()));
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn distribution_validation() {
        assert!(TokenDistribution::new(vec!["a".into()], vec![0.0]).is_err());
        assert!(TokenDistribution::new(vec!["a".into(), "b".into()], vec![0.7, 0.7]).is_err());
        assert!(TokenDistribution::new(vec!["a".into()], vec![0.5, 0.5]).is_err());
        assert!(TokenDistribution::new(vec!["a".into(), "b".into()], vec![0.5, 0.3]).is_ok());
        let d = TokenDistribution::from_logprobs([("x".to_string(), 0.0)]);
        assert_eq!(d.probs, vec![1.0]);
    }
}
