//! Chat-completion client that rewrites template captions, plus an
//! in-process deterministic mock.
//!
//! Requests go to `POST {base_url}/chat/completions` with a fixed system
//! instruction and the caption as the user message; the reply is read from
//! `choices[0].message.content`. Completions can be cached on disk, keyed by
//! a SHA-256 digest of (model tag, input text, request seed).

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;

pub const PARAPHRASE_INSTRUCTION: &str = "Rewrite the following radiology caption in natural fluent English without adding or removing medical facts.";

/// Environment variable that overrides the configured bearer token.
pub const TOKEN_ENV_VAR: &str = "KILAB_API_TOKEN";

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParaphraseConfig {
    pub base_url: String,
    pub model_tag: String,
    /// Never serialized; prefer the environment variable.
    #[serde(skip_serializing)]
    pub bearer_token: Option<String>,
    /// Per-request timeout in seconds.
    pub timeout: f64,
    pub max_retries: u32,
    pub temperature: f64,
    pub cache_dir: Option<PathBuf>,
    /// First backoff delay; doubles on every retry.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for ParaphraseConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_tag: "default".into(),
            bearer_token: None,
            timeout: 30.0,
            max_retries: 3,
            temperature: 0.7,
            cache_dir: None,
            backoff_ms: 250,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl ParaphraseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(Error::Config(format!(
                "timeout must be > 0, got {}",
                self.timeout
            )));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature must be in [0, 2], got {}",
                self.temperature
            )));
        }
        if self.model_tag.is_empty() {
            return Err(Error::Config("model_tag is empty".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParaphraseResult {
    pub text: String,
    pub model_tag: String,
    pub from_cache: bool,
}

/// Behaviour of the in-process mock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockKind {
    Identity,
    Uppercase,
    AlwaysFail,
}

impl MockKind {
    pub fn model_tag(self) -> &'static str {
        match self {
            MockKind::Identity => "mock-identity",
            MockKind::Uppercase => "mock-uppercase",
            MockKind::AlwaysFail => "mock-fail",
        }
    }
}

enum Backend {
    Http(reqwest::blocking::Client),
    Mock(MockKind),
}

pub struct ParaphraseClient {
    cfg: ParaphraseConfig,
    backend: Backend,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    requests: AtomicUsize,
}

impl std::fmt::Debug for ParaphraseClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParaphraseClient")
            .field("model_tag", &self.cfg.model_tag)
            .field("base_url", &self.cfg.base_url)
            .finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl ParaphraseClient {
    /// HTTP client. A bearer token in [`TOKEN_ENV_VAR`] takes precedence
    /// over the configured one.
    pub fn http(mut cfg: ParaphraseConfig) -> Result<Self> {
        cfg.validate()?;
        if let Ok(token) = std::env::var(TOKEN_ENV_VAR) {
            if !token.is_empty() {
                cfg.bearer_token = Some(token);
            }
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout))
            .build()
            .map_err(|e| Error::Config(format!("cannot build http client: {e}")))?;
        Ok(Self::with_backend(cfg, Backend::Http(client)))
    }

    pub fn mock(kind: MockKind) -> Self {
        Self::mock_with(kind, None)
    }

    pub fn mock_with(kind: MockKind, cache_dir: Option<PathBuf>) -> Self {
        let cfg = ParaphraseConfig {
            model_tag: kind.model_tag().into(),
            base_url: "mock://".into(),
            cache_dir,
            max_retries: 0,
            ..ParaphraseConfig::default()
        };
        Self::with_backend(cfg, Backend::Mock(kind))
    }

    fn with_backend(cfg: ParaphraseConfig, backend: Backend) -> Self {
        Self {
            cfg,
            backend,
            key_locks: Mutex::new(HashMap::new()),
            requests: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &ParaphraseConfig {
        &self.cfg
    }

    pub fn max_in_flight(&self) -> usize {
        self.cfg.max_in_flight
    }

    /// Number of backend requests issued so far (cache hits excluded).
    pub fn requests_issued(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn cache_key(model_tag: &str, input: &str, request_seed: u64) -> String {
        let mut buf = Vec::with_capacity(model_tag.len() + input.len() + 10);
        buf.extend_from_slice(model_tag.as_bytes());
        buf.push(0);
        buf.extend_from_slice(input.as_bytes());
        buf.push(0);
        buf.extend_from_slice(&request_seed.to_le_bytes());
        sha256_hex(&buf)
    }

    pub fn paraphrase(&self, input: &str, request_seed: u64) -> Result<ParaphraseResult> {
        if input.trim().is_empty() {
            return Err(Error::Config("paraphrase input is empty".into()));
        }
        let Some(dir) = &self.cfg.cache_dir else {
            return self
                .fetch(input, request_seed)
                .map(|text| self.result(text, false));
        };
        let key = Self::cache_key(&self.cfg.model_tag, input, request_seed);
        let lock = {
            let mut locks = self.key_locks.lock().expect("lock table");
            locks.entry(key.clone()).or_default().clone()
        };
        let _guard = lock.lock().expect("cache key lock");
        let path = dir.join(&key);
        if let Ok(text) = std::fs::read_to_string(&path) {
            return Ok(self.result(text, true));
        }
        let text = self.fetch(input, request_seed)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!("{key}.tmp"));
        std::fs::write(&tmp, &text)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| Error::io(&path, e))?;
        Ok(self.result(text, false))
    }

    fn result(&self, text: String, from_cache: bool) -> ParaphraseResult {
        ParaphraseResult {
            text,
            model_tag: self.cfg.model_tag.clone(),
            from_cache,
        }
    }

    fn fetch(&self, input: &str, request_seed: u64) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let delay = self
                    .cfg
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            self.requests.fetch_add(1, Ordering::SeqCst);
            match self.attempt(input, request_seed) {
                Ok(raw) => {
                    let text = raw.trim();
                    if text.is_empty() {
                        return Err(Error::EmptyCompletion);
                    }
                    return Ok(text.to_string());
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::Transport {
            attempts: self.cfg.max_retries + 1,
            message: last,
        })
    }

    fn attempt(&self, input: &str, request_seed: u64) -> Result<String, Attempt> {
        match &self.backend {
            Backend::Mock(MockKind::Identity) => Ok(input.to_string()),
            Backend::Mock(MockKind::Uppercase) => Ok(input.to_uppercase()),
            Backend::Mock(MockKind::AlwaysFail) => Err(Attempt::Retry("mock failure".into())),
            Backend::Http(client) => self.post(client, input, request_seed),
        }
    }

    fn post(
        &self,
        client: &reqwest::blocking::Client,
        input: &str,
        request_seed: u64,
    ) -> Result<String, Attempt> {
        let url = format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let body = request_body(
            &self.cfg.model_tag,
            input,
            self.cfg.temperature,
            request_seed,
        );
        let mut req = client.post(&url).json(&body);
        if let Some(token) = &self.cfg.bearer_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("http status {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::Protocol(format!(
                "http status {status}"
            ))));
        }
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        parse_completion(&text).map_err(Attempt::Fatal)
    }
}

pub fn request_body(model: &str, input: &str, temperature: f64, seed: u64) -> Value {
    json!({
        "model": model,
        "messages": [
            {"role": "system", "content": PARAPHRASE_INSTRUCTION},
            {"role": "user", "content": input},
        ],
        "temperature": temperature,
        "seed": seed,
    })
}

/// Extracts `choices[0].message.content` from a completion response body.
pub fn parse_completion(body: &str) -> Result<String> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| Error::Protocol(format!("invalid json: {e}")))?;
    let choices = v
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Protocol("missing choices array".into()))?;
    let first = choices
        .first()
        .ok_or_else(|| Error::Protocol("empty choices array".into()))?;
    first
        .pointer("/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Protocol("choices[0].message.content is not a string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mock() {
        let c = ParaphraseClient::mock(MockKind::Identity);
        let r = c.paraphrase("Pneumonia", 1).unwrap();
        assert_eq!(r.text, "Pneumonia");
        assert!(!r.from_cache);
        assert_eq!(r.model_tag, "mock-identity");
    }

    #[test]
    fn cache_hit_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let c = ParaphraseClient::mock_with(MockKind::Identity, Some(dir.path().to_path_buf()));
        let a = c.paraphrase("Pneumonia", 1).unwrap();
        let b = c.paraphrase("Pneumonia", 1).unwrap();
        assert_eq!(a.text, b.text);
        assert!(!a.from_cache);
        assert!(b.from_cache);
        assert_eq!(c.requests_issued(), 1);
        let key = ParaphraseClient::cache_key("mock-identity", "Pneumonia", 1);
        assert_eq!(key.len(), 64);
        assert_eq!(
            std::fs::read_to_string(dir.path().join(key)).unwrap(),
            "Pneumonia"
        );
        // different seed, different key
        assert!(!c.paraphrase("Pneumonia", 2).unwrap().from_cache);
    }

    #[test]
    fn completion_parsing() {
        assert_eq!(
            parse_completion(
                r#"{"choices":[{"message":{"role":"assistant","content":"  hi \n"}}]}"#
            )
            .unwrap(),
            "  hi \n"
        );
        assert!(matches!(
            parse_completion(r#"{"choices":[]}"#),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            parse_completion("not json"),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            parse_completion(r#"{"choices":[{"message":{}}]}"#),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn request_shape() {
        let b = request_body("m", "text", 0.5, 9);
        assert_eq!(b["model"], "m");
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][0]["content"], PARAPHRASE_INSTRUCTION);
        assert_eq!(b["messages"][1]["content"], "text");
        assert_eq!(b["seed"], 9);
    }

    #[test]
    fn config_validation() {
        let bad = ParaphraseConfig {
            timeout: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ParaphraseConfig {
            temperature: 2.5,
            ..Default::default()
        };
        assert!(matches!(ParaphraseClient::http(bad), Err(Error::Config(_))));
    }

    #[test]
    fn failing_mock_reports_transport_error() {
        let c = ParaphraseClient::mock(MockKind::AlwaysFail);
        assert!(matches!(
            c.paraphrase("x", 0),
            Err(Error::Transport { attempts: 1, .. })
        ));
    }
}
