//! Generation backends: a chat-completion HTTP client and a deterministic
//! mock oracle that behaves like a perfectly aligned editing model.

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Benchmark, Scope};
use crate::embed::fnv1a_seeded;
use crate::http::{self, HttpError, RetryPolicy};
use crate::metrics::normalize;
use crate::prompt::PromptTemplate;

pub const API_KEY_ENV: &str = "LTE_BACKEND_API_KEY";
pub const MOCK_FALLBACK: &str = "UNKNOWN";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether the failure came from the upstream service rather than from a
    /// malformed request.
    pub fn is_upstream(&self) -> bool {
        matches!(self, BackendError::Http(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    /// 0 means greedy decoding.
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens: 100,
            temperature: 0.0,
            stop: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens < 1 {
            return Err(BackendError::InvalidRequest(
                "max_new_tokens must be >= 1".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub latency_seconds: f64,
    pub backend_id: String,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatClientConfig {
    /// Requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Optional system message; none is sent by default.
    pub system_prompt: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            system_prompt: None,
            timeout_secs: 120.0,
            max_retries: 3,
            initial_backoff_ms: 200,
            max_backoff_ms: 5_000,
        }
    }
}

/// OpenAI-style chat-completion client. The prompt is sent verbatim as the
/// content of a single user message.
pub struct ChatCompletionClient {
    cfg: ChatClientConfig,
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    id: String,
}

impl ChatCompletionClient {
    pub fn new(cfg: ChatClientConfig) -> Result<Self, BackendError> {
        if cfg.base_url.is_empty() {
            return Err(BackendError::Config("base_url is empty".into()));
        }
        let agent = http::build_agent(Duration::from_secs_f64(cfg.timeout_secs));
        let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
        let id = format!("chat:{}", cfg.model);
        Ok(Self {
            token: http::token_from_env(API_KEY_ENV),
            cfg,
            agent,
            url,
            id,
        })
    }

    pub fn request_body(&self, request: &GenerationRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &self.cfg.system_prompt {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.prompt}));
        let mut body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
        });
        if let Some(stop) = &request.stop {
            body["stop"] = json!(stop);
        }
        body
    }
}

impl Backend for ChatCompletionClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let body = self.request_body(request);
        let retry = RetryPolicy {
            max_retries: self.cfg.max_retries,
            initial_backoff: Duration::from_millis(self.cfg.initial_backoff_ms),
            max_backoff: Duration::from_millis(self.cfg.max_backoff_ms),
        };
        let start = Instant::now();
        let (request_id, resp) =
            http::post_json(&self.agent, &self.url, self.token.as_deref(), &body, retry)?;
        let latency_seconds = start.elapsed().as_secs_f64();
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                BackendError::Http(HttpError::Protocol {
                    request_id,
                    message: "missing choices[0].message.content".into(),
                })
            })?
            .to_string();
        Ok(GenerationResult {
            text,
            latency_seconds,
            backend_id: self.id.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRule {
    pub statement: String,
    pub query_pattern: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseRule {
    pub query_pattern: String,
    pub answer: String,
}

/// Which answers the noise coin may corrupt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScope {
    #[default]
    All,
    /// Only answers produced by an edit rule.
    EditedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockOracleConfig {
    pub edit_table: Vec<EditRule>,
    pub base_table: Vec<BaseRule>,
    pub noise_rate: f64,
    pub noise_scope: NoiseScope,
    pub rng_seed: u64,
    /// Sleep injected into every call, for timing tests.
    pub latency_ms: u64,
    pub template: PromptTemplate,
}

impl Default for MockOracleConfig {
    fn default() -> Self {
        Self {
            edit_table: Vec::new(),
            base_table: Vec::new(),
            noise_rate: 0.0,
            noise_scope: NoiseScope::All,
            rng_seed: 0,
            latency_ms: 0,
            template: PromptTemplate::default(),
        }
    }
}

impl MockOracleConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(BackendError::Config(format!(
                "noise_rate must be in [0, 1), got {}",
                self.noise_rate
            )));
        }
        Ok(())
    }

    /// Tables that answer every case of `benchmarks` correctly: in-scope
    /// cases through edit rules keyed on the record statement, out-of-scope
    /// cases and the pre-edit answer through base rules.
    pub fn perfect_for<'a>(benchmarks: impl IntoIterator<Item = &'a Benchmark>) -> Self {
        let mut cfg = Self::default();
        for b in benchmarks {
            for r in &b.records {
                for c in &r.cases {
                    let Some(gold) = &c.gold_answer else { continue };
                    match c.scope {
                        Scope::InScope => cfg.edit_table.push(EditRule {
                            statement: r.descriptor.statement.clone(),
                            query_pattern: c.prompt.clone(),
                            answer: gold.clone(),
                        }),
                        Scope::OutOfScope => cfg.base_table.push(BaseRule {
                            query_pattern: c.prompt.clone(),
                            answer: gold.clone(),
                        }),
                    }
                }
                if let Some(orig) = &r.original_answer {
                    cfg.base_table.push(BaseRule {
                        query_pattern: r.descriptor.edit_input.clone(),
                        answer: orig.clone(),
                    });
                }
            }
        }
        cfg
    }
}

struct NormalizedEditRule {
    statement: String,
    pattern: String,
    answer: String,
}

struct NormalizedBaseRule {
    pattern: String,
    answer: String,
}

/// Deterministic rule-table backend. Output depends only on the prompt and
/// the config, so results are independent of call order and concurrency.
pub struct MockOracle {
    cfg: MockOracleConfig,
    edits: Vec<NormalizedEditRule>,
    bases: Vec<NormalizedBaseRule>,
}

impl MockOracle {
    pub fn new(cfg: MockOracleConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let edits = cfg
            .edit_table
            .iter()
            .map(|r| NormalizedEditRule {
                statement: normalize(&r.statement),
                pattern: normalize(&r.query_pattern),
                answer: r.answer.clone(),
            })
            .collect();
        let bases = cfg
            .base_table
            .iter()
            .map(|r| NormalizedBaseRule {
                pattern: normalize(&r.query_pattern),
                answer: r.answer.clone(),
            })
            .collect();
        Ok(Self { cfg, edits, bases })
    }

    pub fn config(&self) -> &MockOracleConfig {
        &self.cfg
    }

    /// Answers a prompt using the rule tables.
    pub fn answer(&self, prompt: &str) -> String {
        let (block, query) = self.cfg.template.split(prompt);
        let query = normalize(query);
        let mut edited = None;
        if let Some(block) = block {
            let block = normalize(block);
            edited = self
                .edits
                .iter()
                .find(|r| block.contains(&r.statement) && query.contains(&r.pattern))
                .map(|r| r.answer.clone());
        }
        let is_edit = edited.is_some();
        let answer = edited
            .or_else(|| {
                self.bases
                    .iter()
                    .find(|r| query.contains(&r.pattern))
                    .map(|r| r.answer.clone())
            })
            .unwrap_or_else(|| MOCK_FALLBACK.to_string());
        let noisy = match self.cfg.noise_scope {
            NoiseScope::All => true,
            NoiseScope::EditedOnly => is_edit,
        };
        if noisy && self.cfg.noise_rate > 0.0 {
            let h = mix64(fnv1a_seeded(prompt.as_bytes(), self.cfg.rng_seed));
            // Top 53 bits as a uniform draw in [0, 1).
            let u = (h >> 11) as f64 / (1u64 << 53) as f64;
            if u < self.cfg.noise_rate {
                return format!("WRONG-{}", h % 1_000_000);
            }
        }
        answer
    }
}

/// splitmix64 finalizer; spreads FNV output over all 64 bits.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless form of [`MockOracle::answer`].
pub fn mock_generate(prompt: &str, cfg: &MockOracleConfig) -> Result<String, BackendError> {
    Ok(MockOracle::new(cfg.clone())?.answer(prompt))
}

impl Backend for MockOracle {
    fn id(&self) -> &str {
        "mock-oracle"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let start = Instant::now();
        if self.cfg.latency_ms > 0 {
            thread::sleep(Duration::from_millis(self.cfg.latency_ms));
        }
        let text = self.answer(&request.prompt);
        Ok(GenerationResult {
            text,
            latency_seconds: start.elapsed().as_secs_f64(),
            backend_id: self.id().to_string(),
        })
    }
}
