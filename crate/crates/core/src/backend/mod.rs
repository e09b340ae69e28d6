//! Chat-completion backends.
//!
//! Every LLM operator in the training loop goes through [`ChatBackend`]. Two
//! implementations ship: an OpenAI-compatible HTTP client and a scripted,
//! fully deterministic backend used for offline runs and tests. Wrappers add
//! per-tag accounting, request recording and a concurrency cap.

mod http;
mod meter;
mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use meter::{ConcurrencyLimit, Metered, Recording, TagUsage, UsageLedger};
pub use scripted::{
    lower_threshold, piston_expert_decision, policy_threshold, scripted_rules, PistonFeatures,
    RuleRow, Script, ScriptedBackend, DOWN_THRESHOLD_REACH, LOWER_THRESHOLD, NO_CHANGE,
};

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
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
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

/// The operator that issued a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorTag {
    Actor,
    Critic,
    Grad,
    Agg,
    Opt,
}

impl OperatorTag {
    pub const ALL: [OperatorTag; 5] = [
        OperatorTag::Actor,
        OperatorTag::Critic,
        OperatorTag::Grad,
        OperatorTag::Agg,
        OperatorTag::Opt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperatorTag::Actor => "actor",
            OperatorTag::Critic => "critic",
            OperatorTag::Grad => "grad",
            OperatorTag::Agg => "agg",
            OperatorTag::Opt => "opt",
        }
    }
}

impl fmt::Display for OperatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub tag: OperatorTag,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be >= 0 (got {})",
                self.temperature
            )));
        }
        Ok(())
    }

    /// The system prompt and first user turn; what the templates rendered.
    pub fn prompt_text(&self) -> String {
        let system = self.messages.iter().find(|m| m.role == Role::System);
        let user = self.messages.iter().find(|m| m.role == Role::User);
        let mut s = String::new();
        if let Some(m) = system {
            s.push_str(&m.content);
            s.push('\n');
        }
        if let Some(m) = user {
            s.push_str(&m.content);
        }
        s
    }

    /// Copy of the request with the failed reply and a format reminder appended.
    pub fn reprompt(&self, failed_reply: &str, reminder: &str) -> ChatRequest {
        let mut next = self.clone();
        next.messages.push(ChatMessage::assistant(failed_reply));
        next.messages.push(ChatMessage::user(reminder));
        next
    }
}

/// Sampling parameters attached to a rendered request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Decoding {
    pub fn default_for(tag: OperatorTag) -> Self {
        Self {
            temperature: if tag == OperatorTag::Actor { 0.7 } else { 0.2 },
            max_tokens: 1024,
        }
    }
}

/// Per-operator sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    pub actor_temperature: f64,
    pub critic_temperature: f64,
    pub grad_temperature: f64,
    pub agg_temperature: f64,
    pub opt_temperature: f64,
    pub max_tokens: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            actor_temperature: 0.7,
            critic_temperature: 0.2,
            grad_temperature: 0.2,
            agg_temperature: 0.2,
            opt_temperature: 0.2,
            max_tokens: 1024,
        }
    }
}

impl Sampling {
    pub fn decoding(&self, tag: OperatorTag) -> Decoding {
        let temperature = match tag {
            OperatorTag::Actor => self.actor_temperature,
            OperatorTag::Critic => self.critic_temperature,
            OperatorTag::Grad => self.grad_temperature,
            OperatorTag::Agg => self.agg_temperature,
            OperatorTag::Opt => self.opt_temperature,
        };
        Decoding {
            temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for tag in OperatorTag::ALL {
            let t = self.decoding(tag).temperature;
            if t.is_nan() || t < 0.0 {
                return Err(format!("sampling.{tag}_temperature must be >= 0 (got {t})"));
            }
        }
        if self.max_tokens == 0 {
            return Err("sampling.max_tokens must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("unknown script '{0}'")]
    UnknownScript(String),
}

/// Anything that turns a chat request into a completion.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Base delay; attempt `n` waits `backoff_ms * 2^(n-1)` before retrying.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 1000,
        }
    }
}

/// How to reach a backend. API keys are never stored here, only the name of
/// the environment variable that holds one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    /// One script or several joined with `+`; each tag is served by the
    /// first script that handles it.
    pub script_name: String,
    pub seed: u64,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
    pub max_concurrent: usize,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            script_name: "piston_expert+echo_critic+threshold_optimizer".into(),
            seed: 0,
            retry: RetryPolicy::default(),
            timeout_ms: 60_000,
            max_concurrent: 8,
        }
    }
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<(), String> {
        if self.retry.max_attempts < 1 {
            return Err("backend.retry.max_attempts must be at least 1".into());
        }
        if self.max_concurrent < 1 {
            return Err("backend.max_concurrent must be at least 1".into());
        }
        match self.kind {
            BackendKind::Http => {
                if self.base_url.trim().is_empty() {
                    return Err("backend.base_url must be set for http backends".into());
                }
                if self.model.trim().is_empty() {
                    return Err("backend.model must be set for http backends".into());
                }
                if self.api_key_env.trim().is_empty() {
                    return Err("backend.api_key_env must be set for http backends".into());
                }
            }
            BackendKind::Scripted => {
                ScriptedBackend::from_names(&self.script_name, self.seed)
                    .map_err(|e| format!("backend.script_name: {e}"))?;
            }
        }
        Ok(())
    }
}

/// Builds the backend a descriptor names, capped at `max_concurrent`
/// in-flight requests.
pub fn build_backend(desc: &BackendDescriptor) -> Result<Arc<dyn ChatBackend>, BackendError> {
    let inner: Arc<dyn ChatBackend> = match desc.kind {
        BackendKind::Http => Arc::new(HttpBackend::from_descriptor(desc)?),
        BackendKind::Scripted => {
            Arc::new(ScriptedBackend::from_names(&desc.script_name, desc.seed)?)
        }
    };
    Ok(Arc::new(ConcurrencyLimit::new(inner, desc.max_concurrent)))
}

/// Rough token count used when a backend does not report usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}
