//! Chat-completion client for the two LLM roles (node description and
//! decision-tree induction), plus a deterministic fixture-backed mock.
//!
//! Live requests follow the common chat-completions shape:
//! `{"model": ..., "messages": [{"role": ..., "content": ...}]}` in, and the
//! first choice's message content out.
//!
//! Mock mode never touches the transport. Responses come from a fixture
//! file with one JSON object per line, `{"prompt_hash": ..., "response": ...}`,
//! where the hash is [`prompt_hash`] of the rendered messages. Keys of the form
//! `default:describe_node` / `default:induce_tree` override the per-role
//! response used when no hash matches; without them the default is `""`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::MultimodalNode;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("invalid llm config: {0}")]
    Config(String),
    #[error("fixture {path}: line {line}: {message}")]
    Fixture {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("template placeholder {{{{{0}}}}} has no value")]
    UnresolvedPlaceholder(String),
    #[error("llm request failed after {attempts} attempt(s) (status {status:?}): {message}")]
    Request {
        status: Option<u16>,
        attempts: u32,
        message: String,
    },
    #[error("unparseable llm response: {0}")]
    Response(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    Live,
    Mock,
}

impl std::str::FromStr for LlmMode {
    type Err = LlmError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(Self::Live),
            "mock" => Ok(Self::Mock),
            other => Err(LlmError::Config(format!("unknown llm mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmConfig {
    pub mode: LlmMode,
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff: Duration,
    pub max_in_flight: usize,
    pub mock_fixture: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            mode: LlmMode::Mock,
            endpoint: None,
            model: "gpt-4o".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(500),
            max_in_flight: 4,
            mock_fixture: None,
        }
    }
}

impl LlmConfig {
    pub fn mock(fixture: impl Into<PathBuf>) -> Self {
        Self {
            mode: LlmMode::Mock,
            mock_fixture: Some(fixture.into()),
            ..Self::default()
        }
    }

    pub fn live(endpoint: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            mode: LlmMode::Live,
            endpoint: Some(endpoint.into()),
            api_key_env: api_key_env.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        // a mock without a fixture answers every prompt with an empty reply
        if self.mode == LlmMode::Live {
            if self.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(LlmError::Config("live mode requires an endpoint".into()));
            }
            if self.api_key_env.is_empty() {
                return Err(LlmError::Config("live mode requires an api key variable".into()));
            }
        }
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Stable hex key for a rendered prompt.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.role.as_bytes());
        hasher.update([0x1f]);
        hasher.update(m.content.as_bytes());
        hasher.update([0x1e]);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptRole {
    DescribeNode,
    InduceTree,
}

impl PromptRole {
    fn default_key(self) -> &'static str {
        match self {
            Self::DescribeNode => "default:describe_node",
            Self::InduceTree => "default:induce_tree",
        }
    }
}

/// Template text with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role: PromptRole,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn describe_node() -> Self {
        Self {
            role: PromptRole::DescribeNode,
            system: DESCRIBE_SYSTEM.into(),
            user: DESCRIBE_USER.into(),
        }
    }

    pub fn induce_tree() -> Self {
        Self {
            role: PromptRole::InduceTree,
            system: INDUCE_SYSTEM.into(),
            user: INDUCE_USER.into(),
        }
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<Vec<ChatMessage>, LlmError> {
        Ok(vec![
            ChatMessage::system(render_text(&self.system, values)?),
            ChatMessage::user(render_text(&self.user, values)?),
        ])
    }
}

/// Single-pass substitution; inserted values are not rescanned.
pub fn render_text(template: &str, values: &[(&str, &str)]) -> Result<String, LlmError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| LlmError::UnresolvedPlaceholder(after.chars().take(20).collect()))?;
        let name = after[..end].trim();
        let value = values
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| LlmError::UnresolvedPlaceholder(name.to_string()))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

const DESCRIBE_SYSTEM: &str = "You are a knowledge-base curator. You write short, factual, \
disambiguating descriptions of named things.";

const DESCRIBE_USER: &str = "Name: {{name}}\n\
Context: {{context}}\n\n\
Write two or three sentences describing what this name most likely refers to given the \
context: its type (person, organization, place, work, ...), the attributes that set it \
apart from other things with a similar name, and closely related entities. \
Reply with the description only.";

const INDUCE_SYSTEM: &str = "You design transparent re-ranking rules for entity linking. \
You reason about which evidence signals are reliable and express the strategy as a small \
decision tree.";

const INDUCE_USER: &str = "Every mention-entity candidate pair comes with a prior score \
s_prior in [0, 1] from multi-view retrieval and a 14-dimensional evidence vector.\n\n\
Corpus statistics:\n{{corpus_stats}}\n\n\
Feature glossary:\n{{feature_glossary}}\n\n\
Guidelines:\n\
- Prefer candidates whose evidence agrees across views (text and image, instance and group).\n\
- A high score on a single view with weak support elsewhere (large stat_gap, low stat_mu) is suspicious.\n\
- When has_img_m or has_img_e is 0, the image-dependent inst_* values are 0 placeholders; do not penalize them.\n\
- Strong lexical agreement is a reliable anchor for aliases and near-exact names.\n\n\
Output a decision tree of depth at most {{max_depth}}. Each node tests one feature (or s_prior) \
against a threshold and adds delta_true or delta_false (each in [-1, 1]) to the score along the \
branch taken. Reply with a single fenced ```json block using this schema:\n\
{{schema}}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, String>;
}

/// Blocking HTTP transport.
#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("content-type", "application/json");
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct LlmClient {
    cfg: LlmConfig,
    transport: Arc<dyn Transport>,
    fixture: HashMap<String, String>,
    api_key: Option<String>,
    in_flight: Semaphore,
    requests: AtomicUsize,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("mode", &self.cfg.mode)
            .field("model", &self.cfg.model)
            .field("fixture_entries", &self.fixture.len())
            .finish()
    }
}

impl LlmClient {
    pub fn new(cfg: LlmConfig) -> Result<Self, LlmError> {
        Self::with_transport(cfg, Arc::new(HttpTransport))
    }

    pub fn with_transport(cfg: LlmConfig, transport: Arc<dyn Transport>) -> Result<Self, LlmError> {
        cfg.validate()?;
        let fixture = match (&cfg.mode, &cfg.mock_fixture) {
            (LlmMode::Mock, Some(path)) => load_fixture(path)?,
            _ => HashMap::new(),
        };
        let api_key = match cfg.mode {
            LlmMode::Live => Some(std::env::var(&cfg.api_key_env).map_err(|_| {
                LlmError::Config(format!("environment variable {} is not set", cfg.api_key_env))
            })?),
            LlmMode::Mock => None,
        };
        let in_flight = Semaphore::new(cfg.max_in_flight);
        Ok(Self {
            cfg,
            transport,
            fixture,
            api_key,
            in_flight,
            requests: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }

    /// Number of transport requests issued so far, retries included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn complete(&self, role: PromptRole, messages: &[ChatMessage]) -> Result<String, LlmError> {
        match self.cfg.mode {
            LlmMode::Mock => Ok(self.mock_response(role, messages)),
            LlmMode::Live => self.live_complete(messages),
        }
    }

    fn mock_response(&self, role: PromptRole, messages: &[ChatMessage]) -> String {
        let key = prompt_hash(messages);
        self.fixture
            .get(&key)
            .or_else(|| self.fixture.get(role.default_key()))
            .cloned()
            .unwrap_or_default()
    }

    fn live_complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let url = self.cfg.endpoint.as_deref().unwrap_or_default();
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": 0,
        })
        .to_string();
        let mut headers = Vec::new();
        if let Some(key) = &self.api_key {
            headers.push(("authorization".to_string(), format!("Bearer {key}")));
        }

        let _permit = self.in_flight.acquire();
        let max_attempts = self.cfg.max_retries + 1;
        let mut delay = self.cfg.backoff;
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 1..=max_attempts {
            self.requests.fetch_add(1, Ordering::Relaxed);
            match self.transport.post_json(url, &headers, &body, self.cfg.timeout) {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return parse_completion(&resp.body);
                }
                Ok(resp) => {
                    last_status = Some(resp.status);
                    last_message = resp.body.chars().take(200).collect();
                    let retryable = resp.status == 408 || resp.status == 429 || resp.status >= 500;
                    if !retryable {
                        return Err(LlmError::Request {
                            status: last_status,
                            attempts: attempt,
                            message: last_message,
                        });
                    }
                }
                Err(e) => {
                    last_status = None;
                    last_message = e;
                }
            }
            if attempt < max_attempts {
                log::debug!("llm attempt {attempt} failed, retrying in {delay:?}");
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(LlmError::Request {
            status: last_status,
            attempts: max_attempts,
            message: last_message,
        })
    }
}

/// First text content of the first choice.
pub fn parse_completion(body: &str) -> Result<String, LlmError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| LlmError::Response(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| LlmError::Response("missing choices[0].message.content".into()))?;
    match content {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Array(parts) => parts
            .iter()
            .find_map(|p| p.get("text").and_then(|t| t.as_str()))
            .map(str::to_string)
            .ok_or_else(|| LlmError::Response("no text part in content".into())),
        _ => Err(LlmError::Response("content is neither text nor parts".into())),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureRecord {
    prompt_hash: String,
    response: String,
}

pub fn load_fixture(path: &Path) -> Result<HashMap<String, String>, LlmError> {
    let reader = BufReader::new(File::open(path)?);
    let mut map = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FixtureRecord = serde_json::from_str(&line).map_err(|e| LlmError::Fixture {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        map.insert(rec.prompt_hash, rec.response);
    }
    Ok(map)
}

/// One fixture line, ready to append to a fixture file.
pub fn fixture_line(prompt_hash: &str, response: &str) -> String {
    serde_json::to_string(&FixtureRecord {
        prompt_hash: prompt_hash.to_string(),
        response: response.to_string(),
    })
    .expect("fixture record serializes")
}

pub fn describe_node_prompt(node: &MultimodalNode) -> Result<Vec<ChatMessage>, LlmError> {
    PromptTemplate::describe_node().render(&[("name", &node.name), ("context", &node.context)])
}

pub fn describe_node(client: &LlmClient, node: &MultimodalNode) -> Result<String, LlmError> {
    let messages = describe_node_prompt(node)?;
    client.complete(PromptRole::DescribeNode, &messages)
}
