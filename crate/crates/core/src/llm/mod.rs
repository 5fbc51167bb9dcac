//! Access to the frozen base model: HTTP, mock and replay backends behind
//! one trait, plus token accounting.

mod http;
mod mock;
mod replay;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{EventKind, Run, StoreError, TraceLog};

pub use http::{HttpBackend, HttpReply, HttpTransport, RetryPolicy, UreqTransport};
pub use mock::{MockBackend, MockRule};
pub use replay::ReplayBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
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
        Self { role: Role::User, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub messages: Vec<ChatMessage>,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub sample_index: u32,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        match self.messages.last() {
            None => Err(BackendError::InvalidRequest("no messages".into())),
            Some(m) if m.role == Role::Assistant => {
                Err(BackendError::InvalidRequest("last message must be user or system".into()))
            }
            Some(_) if self.max_output_tokens == 0 => {
                Err(BackendError::InvalidRequest("max_output_tokens must be positive".into()))
            }
            Some(_) if !(self.temperature >= 0.0 && self.temperature.is_finite()) => {
                Err(BackendError::InvalidRequest("temperature must be a non-negative number".into()))
            }
            Some(_) => Ok(()),
        }
    }

    /// Content of the last user message, or of the last message if none is
    /// from the user.
    pub fn final_user_message(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .or(self.messages.last())
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub backend_id: String,
}

/// Where a call comes from; the replay backend keys its log on it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CallContext {
    pub dataset_id: String,
    pub example_id: String,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("backend rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("no logged response left for {dataset_id}/{example_id} call {ordinal}")]
    ReplayMiss { dataset_id: String, example_id: String, ordinal: usize },
    #[error("no mock rule matched and no default is configured")]
    MockMiss,
    #[error("backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &LlmRequest, ctx: &CallContext) -> Result<LlmResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenEstimator {
    /// ceil(utf8 bytes / 4)
    #[default]
    BytesDiv4,
    /// Whitespace-separated words.
    Words,
}

impl TokenEstimator {
    pub fn count(self, text: &str) -> u64 {
        match self {
            TokenEstimator::BytesDiv4 => (text.len() as u64).div_ceil(4),
            TokenEstimator::Words => text.split_whitespace().count() as u64,
        }
    }
}

/// Default estimator: ceil(bytes / 4).
pub fn count_tokens(text: &str) -> u64 {
    TokenEstimator::BytesDiv4.count(text)
}

/// Message contents joined by blank lines; the unit prompt size is measured on.
pub fn prompt_text(messages: &[ChatMessage]) -> String {
    messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n")
}

/// Log one call as a `prompt` event followed by a `model_output` event.
pub fn record_response(
    trace: &dyn TraceLog,
    ctx: &CallContext,
    request: &LlmRequest,
    response: &LlmResponse,
    estimator: TokenEstimator,
) -> Result<(), StoreError> {
    let prompt = prompt_text(&request.messages);
    trace.log(&ctx.dataset_id, &ctx.example_id, EventKind::Prompt, &prompt, Some(estimator.count(&prompt)))?;
    trace.log(
        &ctx.dataset_id,
        &ctx.example_id,
        EventKind::ModelOutput,
        &response.content,
        Some(response.completion_tokens),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub api_key_env_var: Option<String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default_output: Option<String>,
    /// Candidate id whose traces are replayed.
    #[serde(default)]
    pub replay_source: Option<String>,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub request_timeout_s: u64,
}

fn default_parallel() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

impl BackendConfig {
    pub fn mock(rules: Vec<MockRule>, default_output: Option<&str>) -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: None,
            api_key_env_var: None,
            rules,
            default_output: default_output.map(str::to_string),
            replay_source: None,
            max_parallel: default_parallel(),
            retry: RetryPolicy::default(),
            request_timeout_s: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_parallel == 0 {
            return Err(BackendError::Config("max_parallel must be positive".into()));
        }
        match self.kind {
            BackendKind::Http if self.endpoint_url.is_none() || self.model_name.is_none() => {
                Err(BackendError::Config("http backend needs endpoint_url and model_name".into()))
            }
            BackendKind::Mock if self.rules.is_empty() && self.default_output.is_none() => {
                Err(BackendError::Config("mock backend needs rules or default_output".into()))
            }
            BackendKind::Replay if self.replay_source.is_none() => {
                Err(BackendError::Config("replay backend needs replay_source".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Build a backend; replay needs the run its source candidate lives in.
pub fn build_backend(
    config: &BackendConfig,
    estimator: TokenEstimator,
    run: Option<&Run>,
) -> Result<Arc<dyn LlmBackend>, BackendError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Mock => Arc::new(MockBackend::new(config.rules.clone(), config.default_output.clone(), estimator)),
        BackendKind::Http => Arc::new(HttpBackend::from_config(config, estimator)?),
        BackendKind::Replay => {
            let run = run.ok_or_else(|| BackendError::Config("replay backend needs a run".into()))?;
            let source = config.replay_source.as_deref().expect("validated");
            Arc::new(ReplayBackend::from_run(run, &run.resolve(source)?)?)
        }
    })
}
