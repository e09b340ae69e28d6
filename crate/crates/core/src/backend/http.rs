//! OpenAI-compatible `/chat/completions` client with retry and backoff.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{
    estimate_tokens, BackendDescriptor, BackendError, ChatBackend, ChatMessage, ChatRequest,
    ChatResponse, RetryPolicy, Usage,
};

pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Attempt {
    Done(ChatResponse),
    Retry(BackendError),
    Fatal(BackendError),
}

impl HttpBackend {
    /// Resolves the API key from the environment; fails before any network
    /// traffic when it is unset.
    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self, BackendError> {
        let api_key = std::env::var(&desc.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                BackendError::Auth(format!(
                    "environment variable {} is not set",
                    desc.api_key_env
                ))
            })?;
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(desc.timeout_ms)))
            .build();
        Ok(Self {
            endpoint: format!("{}/chat/completions", desc.base_url.trim_end_matches('/')),
            model: desc.model.clone(),
            api_key,
            retry: desc.retry.clone(),
            agent: config.into(),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, request: &ChatRequest, attempts: u32) -> Attempt {
        let body = WireRequest {
            model: &self.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let started = Instant::now();
        let result = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body);
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Attempt::Retry(BackendError::Timeout { attempts })
            }
            Err(e) => {
                return Attempt::Retry(BackendError::Transport {
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => {
                return Attempt::Retry(BackendError::Timeout { attempts })
            }
            Err(e) => {
                return Attempt::Retry(BackendError::Transport {
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        match status {
            200..=299 => {}
            401 | 403 => {
                return Attempt::Fatal(BackendError::Auth(format!("HTTP {status}: {text}")))
            }
            429 => return Attempt::Retry(BackendError::RateLimited { attempts }),
            500..=599 => {
                return Attempt::Retry(BackendError::Transport {
                    attempts,
                    message: format!("HTTP {status}: {text}"),
                })
            }
            _ => return Attempt::Fatal(BackendError::Status { status, body: text }),
        }
        let wire: WireResponse = match serde_json::from_str(&text) {
            Ok(w) => w,
            Err(e) => return Attempt::Fatal(BackendError::InvalidResponse(e.to_string())),
        };
        let Some(content) = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
        else {
            return Attempt::Fatal(BackendError::InvalidResponse(
                "response has no choices[0].message.content".into(),
            ));
        };
        let usage = wire.usage.map_or_else(
            || Usage {
                prompt_tokens: estimate_tokens(&request.prompt_text()),
                completion_tokens: estimate_tokens(&content),
            },
            |u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            },
        );
        Attempt::Done(ChatResponse {
            text: content,
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.attempt(request, attempt) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) if attempt >= max => {
                    warn!(tag = %request.tag, attempt, "giving up: {e}");
                    return Err(e);
                }
                Attempt::Retry(e) => {
                    let delay = self
                        .retry
                        .backoff_ms
                        .saturating_mul(1 << (attempt - 1).min(16));
                    debug!(tag = %request.tag, attempt, delay, "retrying after: {e}");
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        }
    }
}
