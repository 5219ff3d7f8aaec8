//! Chat-completion access: a client for OpenAI-compatible
//! `/v1/chat/completions` endpoints with bounded retries, and a scripted mock
//! that answers from canned events for hermetic runs.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::{debug, warn};

use crate::embed::fnv1a64;
use crate::events::{PoliticalEvent, Slot};
use crate::http::{self, HttpError};
use crate::prompt::AssembledPrompt;

/// Replacement value written into corrupted slots by the mock.
pub const CORRUPTED: &str = "CORRUPTED";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint rejected the request with HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("invalid LLM configuration: {0}")]
    Config(String),
    #[error("cannot load mock script: {0}")]
    Script(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    /// Retries after the first attempt for connect errors, 429 and 5xx.
    pub max_retries: u32,
    /// First backoff delay; doubled on each further retry.
    pub initial_backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000".into(),
            model: "llama-2-7b-chat".into(),
            temperature: 0.0,
            max_tokens: 1024,
            timeout_secs: 30.0,
            max_retries: 3,
            initial_backoff_ms: 500,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.endpoint.trim().is_empty() {
            return Err(LlmError::Config("endpoint is empty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::Config("temperature must be >= 0".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(LlmError::Config("timeout must be > 0".into()));
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(1 << retry.min(16)))
    }

    /// Worst-case wall time of one [`complete`] call.
    pub fn max_blocking(&self) -> Duration {
        let attempts = self.max_retries + 1;
        let backoff: Duration = (0..self.max_retries).map(|r| self.backoff(r)).sum();
        Duration::from_secs_f64(self.timeout_secs) * attempts + backoff
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub total_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<Usage>,
}

#[derive(Deserialize)]
struct CompletionBody {
    #[serde(default)]
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Option<Message>,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

fn into_response(body: CompletionBody) -> Result<ChatResponse, LlmError> {
    let choice = body
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::Protocol("response has no choices".into()))?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Other,
    };
    let text = choice.message.and_then(|m| m.content);
    match (text, finish_reason) {
        (Some(text), reason) => Ok(ChatResponse {
            text,
            finish_reason: reason,
            usage: body.usage,
        }),
        (None, FinishReason::Stop) => Err(LlmError::Protocol("message content missing".into())),
        (None, reason) => Ok(ChatResponse {
            text: String::new(),
            finish_reason: reason,
            usage: body.usage,
        }),
    }
}

/// Sends the prompt to `<endpoint>/v1/chat/completions`.
///
/// Connect failures, 429 and 5xx are retried up to `max_retries` times with
/// exponential backoff; other 4xx fail immediately; a timeout is final.
pub fn complete(prompt: &AssembledPrompt, config: &LlmConfig) -> Result<ChatResponse, LlmError> {
    config.validate()?;
    let url = http::join_url(&config.endpoint, "/v1/chat/completions");
    let body = json!({
        "model": config.model,
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
        "messages": [
            {"role": "system", "content": prompt.system},
            {"role": "user", "content": prompt.user},
        ],
    });
    let client = http::client(Duration::from_secs_f64(config.timeout_secs))
        .map_err(|e| LlmError::Config(e.to_string()))?;

    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let error = match http::post_json::<CompletionBody>(&client, &url, &body) {
            Ok(body) => return into_response(body),
            Err(HttpError::Timeout) => return Err(LlmError::Timeout),
            Err(HttpError::Decode(msg)) => return Err(LlmError::Protocol(msg)),
            Err(HttpError::Status { status, body }) if status != 429 && status < 500 => {
                return Err(LlmError::Endpoint { status, body })
            }
            Err(retryable) => retryable,
        };
        if attempt > config.max_retries {
            return Err(LlmError::Transport {
                attempts: attempt,
                message: error.to_string(),
            });
        }
        let delay = config.backoff(attempt - 1);
        warn!(attempt, ?delay, %error, "chat completion failed, retrying");
        thread::sleep(delay);
    }
}

/// One canned answer: when a context passage contains `pattern` (and the
/// question contains `question`, if given), emit `event` citing that passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub pattern: String,
    #[serde(default)]
    pub question: Option<String>,
    pub event: PoliticalEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    /// Fraction of emitted non-null slots to overwrite with [`CORRUPTED`].
    #[serde(default)]
    pub corruption_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<MockScript, LlmError> {
        let text = fs::read_to_string(path)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        let script: MockScript = serde_json::from_str(&text)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        if !(0.0..=1.0).contains(&script.corruption_rate) {
            return Err(LlmError::Script("corruption_rate must lie in [0, 1]".into()));
        }
        Ok(script)
    }
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

/// Number of slots the mock corrupts out of `total` at `rate`.
pub fn corruption_count(rate: f64, total: usize) -> usize {
    // The epsilon keeps exact products such as 0.13 × 100 from flooring to 12.
    ((rate * total as f64) + 1e-9).floor().min(total as f64) as usize
}

/// Deterministic stand-in for [`complete`]; a pure function of its inputs.
pub fn mock_complete(prompt: &AssembledPrompt, script: &MockScript) -> ChatResponse {
    let mut events: Vec<PoliticalEvent> = Vec::new();
    for entry in &prompt.context {
        for rule in &script.rules {
            let question_ok = rule
                .question
                .as_deref()
                .is_none_or(|q| contains_ci(&prompt.question, q));
            if question_ok && contains_ci(&entry.text, &rule.pattern) {
                let mut event = rule.event.clone();
                event.sources = vec![entry.tag.clone()];
                events.push(event);
            }
        }
    }

    let positions: Vec<(usize, Slot)> = events
        .iter()
        .enumerate()
        .flat_map(|(i, e)| e.filled_slots().map(move |(slot, _)| (i, slot)))
        .collect();
    let count = corruption_count(script.corruption_rate, positions.len());
    if count > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(script.seed ^ fnv1a64(prompt.user.as_bytes()));
        for chosen in sample(&mut rng, positions.len(), count) {
            let (event, slot) = positions[chosen];
            *events[event].slot_mut(slot) = Some(CORRUPTED.to_owned());
        }
        debug!(count, total = positions.len(), "mock corrupted slots");
    }

    ChatResponse {
        text: serde_json::to_string(&events).expect("events serialize"),
        finish_reason: FinishReason::Stop,
        usage: None,
    }
}

/// Where completions come from.
#[derive(Debug, Clone)]
pub enum LlmBackend {
    Remote(LlmConfig),
    Mock(MockScript),
}

impl LlmBackend {
    pub fn complete(&self, prompt: &AssembledPrompt) -> Result<ChatResponse, LlmError> {
        match self {
            LlmBackend::Remote(config) => complete(prompt, config),
            LlmBackend::Mock(script) => Ok(mock_complete(prompt, script)),
        }
    }
}
