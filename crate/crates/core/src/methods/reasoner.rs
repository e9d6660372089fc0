//! Text-completion backends: live HTTP, disk cache and replay, scripted stubs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::InferenceConfig;

pub const ENDPOINT_VAR: &str = "PRIVCHECK_ENDPOINT";
pub const API_KEY_VAR: &str = "PRIVCHECK_API_KEY";

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("no cached response for reasoner `{reasoner}` key {key}")]
    CacheMiss { reasoner: String, key: String },
    #[error("cache i/o at {path}: {message}")]
    Cache { path: String, message: String },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("{0}")]
    Config(String),
    #[error("scripted reasoner exhausted after {0} call(s)")]
    Exhausted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Canonical prompt text: a lone user turn is its content, otherwise the
/// JSON-encoded transcript.
pub fn prompt_text(messages: &[ChatMessage]) -> String {
    match messages {
        [m] if m.role == Role::User => m.content.clone(),
        _ => serde_json::to_string(messages).expect("messages serialize"),
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub trait Reasoner: Send + Sync {
    /// Stable identifier used in cache keys.
    fn id(&self) -> &str;

    fn complete(
        &self,
        messages: &[ChatMessage],
        config: &InferenceConfig,
    ) -> Result<String, ReasonerError>;
}

impl<R: Reasoner + ?Sized> Reasoner for std::sync::Arc<R> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        config: &InferenceConfig,
    ) -> Result<String, ReasonerError> {
        (**self).complete(messages, config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Runs `f` until it succeeds, doubling the delay between attempts.
pub fn with_retry<T>(
    policy: RetryPolicy,
    mut f: impl FnMut() -> Result<T, String>,
) -> Result<T, ReasonerError> {
    let attempts = policy.attempts.max(1);
    let mut last = String::new();
    for i in 0..attempts {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) => {
                log::warn!("attempt {}/{} failed: {e}", i + 1, attempts);
                last = e;
                if i + 1 < attempts {
                    std::thread::sleep(policy.base_delay * 2u32.pow(i));
                }
            }
        }
    }
    Err(ReasonerError::Transport {
        attempts,
        message: last,
    })
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug, Clone)]
pub struct HttpReasoner {
    id: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    timeout: Duration,
}

impl HttpReasoner {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Self {
        let model = model.into();
        Self {
            id: format!("http-{model}"),
            endpoint: endpoint.into(),
            model,
            api_key,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }

    /// Endpoint and key from the environment.
    pub fn from_env(model: impl Into<String>) -> Result<Self, ReasonerError> {
        let endpoint = std::env::var(ENDPOINT_VAR)
            .map_err(|_| ReasonerError::Config(format!("{ENDPOINT_VAR} is not set")))?;
        Ok(Self::new(endpoint, model, std::env::var(API_KEY_VAR).ok()))
    }

    /// Overrides the cache namespace.
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn request(
        &self,
        messages: &[ChatMessage],
        config: &InferenceConfig,
    ) -> Result<String, String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": config.temperature,
            "top_p": config.top_p,
            "max_tokens": config.max_response_tokens,
            "n": config.completions,
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("response has no choices[0].message.content: {value}"))
    }
}

impl Reasoner for HttpReasoner {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        config: &InferenceConfig,
    ) -> Result<String, ReasonerError> {
        with_retry(self.retry, || self.request(messages, config))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub reasoner_id: String,
    pub prompt: String,
    pub response: String,
    pub timestamp: u64,
}

/// One JSON file per (reasoner id, prompt hash).
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, reasoner_id: &str, prompt: &str) -> PathBuf {
        self.root
            .join(sanitize(reasoner_id))
            .join(format!("{}.json", prompt_hash(prompt)))
    }

    pub fn get(
        &self,
        reasoner_id: &str,
        prompt: &str,
    ) -> Result<Option<CacheEntry>, ReasonerError> {
        let path = self.path_for(reasoner_id, prompt);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(ReasonerError::Cache {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            }
        };
        let entry: CacheEntry = serde_json::from_str(&text).map_err(|e| ReasonerError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Some(entry))
    }

    /// Write-once: an existing entry for the same key is left untouched.
    pub fn put(
        &self,
        reasoner_id: &str,
        prompt: &str,
        response: &str,
    ) -> Result<(), ReasonerError> {
        let path = self.path_for(reasoner_id, prompt);
        if path.exists() {
            return Ok(());
        }
        let io_err = |e: std::io::Error| ReasonerError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(io_err)?;
        let entry = CacheEntry {
            reasoner_id: reasoner_id.to_string(),
            prompt: prompt.to_string(),
            response: response.to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(
            &tmp,
            serde_json::to_string_pretty(&entry).expect("entry serializes"),
        )
        .map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Serve hits from disk, forward misses and record them.
    ReadWrite,
    /// Serve hits only; a miss is an error.
    ReplayOnly,
}

pub struct CachedReasoner {
    inner: Option<Box<dyn Reasoner>>,
    id: String,
    cache: ResponseCache,
    mode: CacheMode,
}

impl CachedReasoner {
    pub fn new(inner: Box<dyn Reasoner>, cache: ResponseCache) -> Self {
        Self {
            id: inner.id().to_string(),
            inner: Some(inner),
            cache,
            mode: CacheMode::ReadWrite,
        }
    }

    /// Offline replay of a previously recorded reasoner.
    pub fn replay(id: impl Into<String>, cache: ResponseCache) -> Self {
        Self {
            inner: None,
            id: id.into(),
            cache,
            mode: CacheMode::ReplayOnly,
        }
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }
}

impl Reasoner for CachedReasoner {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        config: &InferenceConfig,
    ) -> Result<String, ReasonerError> {
        let prompt = prompt_text(messages);
        if let Some(hit) = self.cache.get(&self.id, &prompt)? {
            return Ok(hit.response);
        }
        match (&self.inner, self.mode) {
            (Some(inner), CacheMode::ReadWrite) => {
                let response = inner.complete(messages, config)?;
                self.cache.put(&self.id, &prompt, &response)?;
                Ok(response)
            }
            _ => Err(ReasonerError::CacheMiss {
                reasoner: self.id.clone(),
                key: prompt_hash(&prompt),
            }),
        }
    }
}

/// Returns queued responses in order.
pub struct ScriptedReasoner {
    id: String,
    script: Mutex<std::collections::VecDeque<String>>,
    repeat_last: bool,
    last: Mutex<Option<String>>,
    calls: AtomicUsize,
}

impl ScriptedReasoner {
    pub fn new(
        id: impl Into<String>,
        responses: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Self {
            id: id.into(),
            script: Mutex::new(responses.into_iter().map(Into::into).collect()),
            repeat_last: false,
            last: Mutex::new(None),
            calls: AtomicUsize::new(0),
        }
    }

    /// Keeps answering with the final response once the script runs out.
    pub fn repeating(mut self) -> Self {
        self.repeat_last = true;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Reasoner for ScriptedReasoner {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        _messages: &[ChatMessage],
        _config: &InferenceConfig,
    ) -> Result<String, ReasonerError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let next = self.script.lock().expect("script lock").pop_front();
        let mut last = self.last.lock().expect("last lock");
        match next {
            Some(r) => {
                *last = Some(r.clone());
                Ok(r)
            }
            None if self.repeat_last => last.clone().ok_or(ReasonerError::Exhausted(n - 1)),
            None => Err(ReasonerError::Exhausted(n - 1)),
        }
    }
}

type ReplyFn = dyn Fn(&[ChatMessage]) -> Result<String, ReasonerError> + Send + Sync;

/// Answers by calling a closure on the transcript; deterministic if the closure is.
pub struct FnReasoner {
    id: String,
    f: Box<ReplyFn>,
    calls: AtomicUsize,
}

impl FnReasoner {
    pub fn new(
        id: impl Into<String>,
        f: impl Fn(&[ChatMessage]) -> Result<String, ReasonerError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            f: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Reasoner for FnReasoner {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        _config: &InferenceConfig,
    ) -> Result<String, ReasonerError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(messages)
    }
}
