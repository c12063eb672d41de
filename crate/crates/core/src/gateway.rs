//! Chat-completion access with bounded retry and a scripted mock backend.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MODEL: &str = "gpt-4o-2024-08-06";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

/// Every prompted agent in the system. The name keys mock scripts and
/// per-agent temperature settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agent {
    Counsellor,
    Moderator,
    OffTrack,
    EndDetector,
    VirtualClient,
    Parser,
    CounsellorAnnotator,
    ClientAnnotator,
}

impl Agent {
    pub const ALL: [Agent; 8] = [
        Agent::Counsellor,
        Agent::Moderator,
        Agent::OffTrack,
        Agent::EndDetector,
        Agent::VirtualClient,
        Agent::Parser,
        Agent::CounsellorAnnotator,
        Agent::ClientAnnotator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Agent::Counsellor => "counsellor",
            Agent::Moderator => "moderator",
            Agent::OffTrack => "offtrack",
            Agent::EndDetector => "end",
            Agent::VirtualClient => "client",
            Agent::Parser => "parser",
            Agent::CounsellorAnnotator => "annotator-counsellor",
            Agent::ClientAnnotator => "annotator-client",
        }
    }

    /// Dialogue agents sample at 1.0; classifiers run at 0.0.
    pub fn default_temperature(self) -> f64 {
        match self {
            Agent::Counsellor | Agent::VirtualClient => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Assistant,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub agent: String,
    pub system_prompt: String,
    pub messages: Vec<ChatMessage>,
    pub model_id: String,
    pub temperature: f64,
    pub max_attempts: u32,
    /// Forwarded to backends that support seeded sampling.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResult {
    pub text: String,
    pub attempts_used: u32,
    pub backend: BackendKind,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("all {attempts} attempts failed; last error: {last}")]
    TransportExhausted { attempts: u32, last: String },
    #[error("no chat backend configured: {0}")]
    ConfigMissing(String),
    #[error("mock script for agent {0:?} is exhausted")]
    EmptyScript(String),
    #[error("backend rejected the request: {0}")]
    Rejected(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Outcome of a single backend attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    /// Worth retrying (timeouts, connection resets, 429, 5xx).
    Transient(String),
    Fatal(GatewayError),
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn send(&self, req: &ChatRequest) -> Result<String, AttemptError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    /// Delay before retry number `retry` (1-based), doubling each time.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Shareable entry point used by every agent.
#[derive(Clone)]
pub struct Gateway {
    backend: Option<Arc<dyn ChatBackend>>,
    config: GatewayConfig,
    retry: RetryPolicy,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.as_ref().map(|b| b.kind()))
            .field("config", &self.config)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, config: GatewayConfig) -> Self {
        let retry = RetryPolicy {
            base_delay: Duration::from_millis(config.retry_base_delay_ms),
            ..RetryPolicy::default()
        };
        Gateway { backend: Some(backend), config, retry }
    }

    pub fn unconfigured(config: GatewayConfig) -> Self {
        Gateway { backend: None, config, retry: RetryPolicy::default() }
    }

    /// Mock-backed gateway with default settings and no retry delay.
    pub fn mock(mock: MockBackend) -> Self {
        Gateway::new(Arc::new(mock), GatewayConfig::default()).with_retry(RetryPolicy::none())
    }

    /// Remote backend built from config; the API key comes from the environment.
    pub fn remote(config: GatewayConfig) -> Result<Self, GatewayError> {
        let key = std::env::var(&config.api_key_env).map_err(|_| {
            GatewayError::ConfigMissing(format!("environment variable {} is not set", config.api_key_env))
        })?;
        let backend = RemoteBackend::new(&config.endpoint, key, Duration::from_secs(config.timeout_secs))?;
        Ok(Gateway::new(Arc::new(backend), config))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn backend_kind(&self) -> Option<BackendKind> {
        self.backend.as_ref().map(|b| b.kind())
    }

    /// Request skeleton for `agent` using the configured model, temperature and attempts.
    pub fn request(&self, agent: Agent, system_prompt: impl Into<String>, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            agent: agent.name().to_string(),
            system_prompt: system_prompt.into(),
            messages,
            model_id: self.config.model_id.clone(),
            temperature: self.config.temperature(agent),
            max_attempts: self.config.max_attempts,
            seed: None,
        }
    }

    /// Sends `req`, retrying transient transport faults with exponential backoff.
    /// Content-level outcomes are never retried here.
    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResult, GatewayError> {
        let backend = self
            .backend
            .as_ref()
            .ok_or_else(|| GatewayError::ConfigMissing("no backend".into()))?;
        if req.system_prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty system prompt".into()));
        }
        if req.max_attempts == 0 {
            return Err(GatewayError::InvalidRequest("max_attempts must be positive".into()));
        }
        if req.temperature.is_nan() || req.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be non-negative".into()));
        }
        let mut last = String::new();
        for attempt in 1..=req.max_attempts {
            if attempt > 1 {
                let delay = self.retry.delay(attempt - 1);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            match backend.send(req) {
                Ok(text) => {
                    return Ok(ChatResult { text, attempts_used: attempt, backend: backend.kind() })
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(msg)) => {
                    tracing::warn!(agent = %req.agent, attempt, "transient backend failure: {msg}");
                    last = msg;
                }
            }
        }
        Err(GatewayError::TransportExhausted { attempts: req.max_attempts, last })
    }
}

/// Backend configuration. API keys are read from the environment only, so an
/// `api_key` entry in the file is rejected as an unknown field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub model_id: String,
    pub endpoint: String,
    pub max_attempts: u32,
    pub retry_base_delay_ms: u64,
    pub timeout_secs: u64,
    pub api_key_env: String,
    /// Per-agent temperature overrides keyed by agent name.
    pub temperature: HashMap<String, f64>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            model_id: DEFAULT_MODEL.to_string(),
            endpoint: DEFAULT_ENDPOINT.to_string(),
            max_attempts: 3,
            retry_base_delay_ms: 500,
            timeout_secs: 60,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            temperature: HashMap::new(),
        }
    }
}

impl GatewayConfig {
    pub fn temperature(&self, agent: Agent) -> f64 {
        self.temperature
            .get(agent.name())
            .copied()
            .unwrap_or_else(|| agent.default_temperature())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, GatewayError> {
        let cfg: GatewayConfig =
            toml::from_str(s).map_err(|e| GatewayError::ConfigMissing(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self, GatewayError> {
        let cfg: GatewayConfig =
            serde_json::from_str(s).map_err(|e| GatewayError::ConfigMissing(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `.json` files as JSON and everything else as TOML.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::ConfigMissing(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&raw)
        } else {
            Self::from_toml_str(&raw)
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.max_attempts == 0 {
            return Err(GatewayError::ConfigMissing("max_attempts must be positive".into()));
        }
        for (agent, t) in &self.temperature {
            if t.is_nan() || *t < 0.0 {
                return Err(GatewayError::ConfigMissing(format!("temperature for {agent} must be >= 0")));
            }
            if !Agent::ALL.iter().any(|a| a.name() == agent) {
                return Err(GatewayError::ConfigMissing(format!("unknown agent {agent:?} in temperature table")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    /// A transient transport failure for one attempt.
    Fault { fault: String },
}

impl From<&str> for MockReply {
    fn from(s: &str) -> Self {
        MockReply::Text(s.to_string())
    }
}

impl From<String> for MockReply {
    fn from(s: String) -> Self {
        MockReply::Text(s)
    }
}

type Responder = dyn Fn(&ChatRequest) -> Option<String> + Send + Sync;

/// Deterministic backend replaying per-agent FIFO scripts.
///
/// When an agent's queue is empty the optional responder is consulted; without
/// one the call fails with [`GatewayError::EmptyScript`].
#[derive(Default, Clone)]
pub struct MockBackend {
    queues: Arc<Mutex<HashMap<String, VecDeque<MockReply>>>>,
    responder: Option<Arc<Responder>>,
    log: Arc<Mutex<Vec<ChatRequest>>>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn script<I, R>(self, agent: Agent, replies: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: Into<MockReply>,
    {
        self.push_all(agent.name(), replies);
        self
    }

    pub fn push(&self, agent: &str, reply: impl Into<MockReply>) {
        self.queues
            .lock()
            .expect("mock queue poisoned")
            .entry(agent.to_string())
            .or_default()
            .push_back(reply.into());
    }

    pub fn push_all<I, R>(&self, agent: &str, replies: I)
    where
        I: IntoIterator<Item = R>,
        R: Into<MockReply>,
    {
        let mut queues = self.queues.lock().expect("mock queue poisoned");
        let q = queues.entry(agent.to_string()).or_default();
        q.extend(replies.into_iter().map(Into::into));
    }

    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    {
        self.responder = Some(Arc::new(f));
        self
    }

    /// Loads `{"agent": ["reply", {"fault": "..."}, ...]}` scripts.
    pub fn from_json(raw: &str) -> Result<Self, GatewayError> {
        let scripts: HashMap<String, Vec<MockReply>> = serde_json::from_str(raw)
            .map_err(|e| GatewayError::ConfigMissing(format!("invalid mock script: {e}")))?;
        let mock = MockBackend::new();
        for (agent, replies) in scripts {
            mock.push_all(&agent, replies);
        }
        Ok(mock)
    }

    pub fn remaining(&self, agent: Agent) -> usize {
        self.queues
            .lock()
            .expect("mock queue poisoned")
            .get(agent.name())
            .map_or(0, VecDeque::len)
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn requests_for(&self, agent: Agent) -> Vec<ChatRequest> {
        self.requests().into_iter().filter(|r| r.agent == agent.name()).collect()
    }
}

impl ChatBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn send(&self, req: &ChatRequest) -> Result<String, AttemptError> {
        self.log.lock().expect("mock log poisoned").push(req.clone());
        let next = self
            .queues
            .lock()
            .expect("mock queue poisoned")
            .get_mut(&req.agent)
            .and_then(VecDeque::pop_front);
        match next {
            Some(MockReply::Text(t)) => Ok(t),
            Some(MockReply::Fault { fault }) => Err(AttemptError::Transient(fault)),
            None => match self.responder.as_ref().and_then(|f| f(req)) {
                Some(t) => Ok(t),
                None => Err(AttemptError::Fatal(GatewayError::EmptyScript(req.agent.clone()))),
            },
        }
    }
}

/// Chat-completions HTTP+JSON backend.
pub struct RemoteBackend {
    url: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, api_key: String, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::ConfigMissing(format!("http client: {e}")))?;
        Ok(RemoteBackend {
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            api_key,
            client,
        })
    }

    /// JSON body in the chat-completions shape.
    pub fn body(req: &ChatRequest) -> serde_json::Value {
        let mut messages = vec![serde_json::json!({"role": "system", "content": req.system_prompt})];
        messages.extend(req.messages.iter().map(|m| {
            let role = match m.role {
                Role::Assistant => "assistant",
                Role::User => "user",
            };
            serde_json::json!({"role": role, "content": m.text})
        }));
        let mut body = serde_json::json!({
            "model": req.model_id,
            "temperature": req.temperature,
            "messages": messages,
        });
        if let Some(seed) = req.seed {
            body["seed"] = seed.into();
        }
        body
    }

    pub fn extract_text(value: &serde_json::Value) -> Option<String> {
        value
            .get("choices")?
            .get(0)?
            .get("message")?
            .get("content")?
            .as_str()
            .map(str::to_string)
    }
}

impl ChatBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn send(&self, req: &ChatRequest) -> Result<String, AttemptError> {
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&Self::body(req))
            .send()
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Transient(format!("HTTP {status}")));
        }
        let text = resp.text().map_err(|e| AttemptError::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(AttemptError::Fatal(GatewayError::Rejected(format!("HTTP {status}: {text}"))));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| AttemptError::Fatal(GatewayError::Rejected(format!("bad JSON: {e}"))))?;
        Self::extract_text(&value)
            .ok_or_else(|| AttemptError::Fatal(GatewayError::Rejected("response has no message content".into())))
    }
}
