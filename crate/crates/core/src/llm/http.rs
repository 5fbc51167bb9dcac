use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    prompt_text, BackendConfig, BackendError, CallContext, LlmBackend, LlmRequest, LlmResponse, Role,
    TokenEstimator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_backoff_ms: 500 }
    }
}

impl RetryPolicy {
    /// base · 2^(attempt−1) plus up to one base of jitter.
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
        let jitter = if self.base_backoff_ms > 0 { rand::rng().random_range(0..=self.base_backoff_ms) } else { 0 };
        Duration::from_millis(exp.saturating_add(jitter))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One POST of a JSON body. `Err` is a transport failure (no status).
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        Self { agent: config.into() }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, String> {
        let mut request = self.agent.post(url).header("content-type", "application/json");
        if let Some(key) = bearer {
            request = request.header("authorization", format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Counting semaphore bounding in-flight requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Chat-completions client: POST `<endpoint>/chat/completions`.
pub struct HttpBackend {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    estimator: TokenEstimator,
    slots: Slots,
    transport: Box<dyn HttpTransport>,
}

impl HttpBackend {
    pub fn from_config(config: &BackendConfig, estimator: TokenEstimator) -> Result<Self, BackendError> {
        let transport = UreqTransport::new(Duration::from_secs(config.request_timeout_s));
        Self::with_transport(config, estimator, Box::new(transport))
    }

    pub fn with_transport(
        config: &BackendConfig,
        estimator: TokenEstimator,
        transport: Box<dyn HttpTransport>,
    ) -> Result<Self, BackendError> {
        let endpoint = config
            .endpoint_url
            .as_deref()
            .ok_or_else(|| BackendError::Config("endpoint_url missing".into()))?;
        let model = config.model_name.clone().ok_or_else(|| BackendError::Config("model_name missing".into()))?;
        let api_key = match &config.api_key_env_var {
            Some(var) => Some(
                std::env::var(var).map_err(|_| BackendError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        if config.max_parallel == 0 || config.retry.max_attempts == 0 {
            return Err(BackendError::Config("max_parallel and max_attempts must be positive".into()));
        }
        Ok(Self {
            id: format!("http:{model}"),
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            model,
            api_key,
            retry: config.retry,
            estimator,
            slots: Slots { free: Mutex::new(config.max_parallel), cv: Condvar::new() },
            transport,
        })
    }

    fn body(&self, request: &LlmRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        json!({
            "model": self.model,
            "messages": messages,
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        })
    }

    fn parse(&self, request: &LlmRequest, body: &str) -> Result<LlmResponse, String> {
        let v: Value = serde_json::from_str(body).map_err(|e| format!("unparseable response: {e}"))?;
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or("response lacks choices[0].message.content")?
            .to_string();
        let usage = |key: &str| v.pointer(&format!("/usage/{key}")).and_then(Value::as_u64);
        Ok(LlmResponse {
            prompt_tokens: usage("prompt_tokens")
                .unwrap_or_else(|| self.estimator.count(&prompt_text(&request.messages))),
            completion_tokens: usage("completion_tokens").unwrap_or_else(|| self.estimator.count(&content)),
            content,
            backend_id: self.id.clone(),
        })
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &LlmRequest, _ctx: &CallContext) -> Result<LlmResponse, BackendError> {
        request.validate()?;
        let body = self.body(request);
        let _slot = self.slots.acquire();
        let mut last_error = String::new();
        for attempt in 1..=self.retry.max_attempts {
            if attempt > 1 {
                thread::sleep(self.retry.delay(attempt - 1));
            }
            match self.transport.post_json(&self.url, self.api_key.as_deref(), &body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return self
                        .parse(request, &reply.body)
                        .map_err(|message| BackendError::BackendUnavailable { attempts: attempt, message });
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    last_error = format!("status {}: {}", reply.status, reply.body);
                }
                Ok(reply) => return Err(BackendError::Rejected { status: reply.status, body: reply.body }),
                Err(e) => last_error = e,
            }
            tracing::warn!(attempt, error = %last_error, "chat completion attempt failed");
        }
        Err(BackendError::BackendUnavailable { attempts: self.retry.max_attempts, message: last_error })
    }
}
