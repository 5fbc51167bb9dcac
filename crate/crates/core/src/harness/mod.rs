//! The harness abstraction: a stateful program wrapping the base model,
//! driven through init → (learn | predict)* → shutdown.

mod gate;
mod protocol;
mod subprocess;

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{
    prompt_text, record_response, BackendError, CallContext, ChatMessage, LlmBackend, LlmRequest, LlmResponse,
    TokenEstimator,
};
use crate::store::{EventKind, LaunchSpec, StoreError, TraceLog};

pub use gate::{validate_candidate, validate_dir, GateFailure, GateOutcome, SmokeTask};
pub use protocol::{serve, FromHarness, ToHarness};
pub use subprocess::{StderrSink, SubprocessHarness};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    OnlineClassification,
    Qa,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_kind: TaskKind,
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_set: Option<Vec<String>>,
    #[serde(default)]
    pub instruction: String,
    /// Retrieval corpus for harnesses that use one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<String>,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.task_kind == TaskKind::OnlineClassification
            && self.label_set.as_ref().is_none_or(|labels| labels.is_empty())
        {
            return Err(HarnessError::InvalidInput("classification task without a label set".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        self.label_set.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: String,
    pub input_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Example {
    pub fn new(id: &str, text: &str, label: Option<&str>) -> Self {
        Self { example_id: id.into(), input_text: text.into(), label: label.map(str::to_string) }
    }

    pub fn without_label(&self) -> Example {
        Example { label: None, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<serde_json::Value>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("lifecycle violation: {0}")]
    Lifecycle(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{op} timed out")]
    Timeout { op: &'static str },
    #[error("harness process exited during {op} ({status})")]
    Exited { op: &'static str, status: String },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: String },
    #[error("harness reported: {0}")]
    Reported(String),
    #[error("prediction for {got}, expected {expected}")]
    WrongExample { expected: String, got: String },
    #[error("prediction has an empty label")]
    EmptyLabel,
    #[error("cannot start harness: {0}")]
    Spawn(String),
    #[error("harness failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl HarnessError {
    /// Failures attributable to the harness rather than to the model or store.
    pub fn is_protocol_error(&self) -> bool {
        !matches!(self, HarnessError::Backend(_) | HarnessError::Store(_))
    }
}

/// What a running harness may ask of the orchestrator.
pub trait HarnessIo {
    fn complete(
        &mut self,
        messages: Vec<ChatMessage>,
        max_output_tokens: u32,
        temperature: f64,
    ) -> Result<LlmResponse, HarnessError>;

    /// Report a state change; logged as a `state_update` event.
    fn state(&mut self, payload: &str) -> Result<(), HarnessError>;
}

pub trait HarnessProgram: Send {
    fn init(&mut self, config: &TaskConfig) -> Result<(), HarnessError>;
    fn learn(&mut self, example: &Example, io: &mut dyn HarnessIo) -> Result<(), HarnessError>;
    fn predict(&mut self, query: &Example, io: &mut dyn HarnessIo) -> Result<Prediction, HarnessError>;
    fn shutdown(&mut self) -> Result<(), HarnessError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lifecycle {
    Created,
    Initialized,
    ShutDown,
}

/// Model usage of one `predict`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutcome {
    pub prediction: Prediction,
    pub calls: u64,
    /// Estimated prompt tokens summed over the nested calls.
    pub prompt_tokens: u64,
    pub prompt_chars: u64,
}

struct LearnIo<'a> {
    trace: &'a dyn TraceLog,
    dataset_id: &'a str,
    example_id: &'a str,
    states: usize,
}

impl HarnessIo for LearnIo<'_> {
    fn complete(&mut self, _: Vec<ChatMessage>, _: u32, _: f64) -> Result<LlmResponse, HarnessError> {
        Err(HarnessError::Lifecycle("model calls are only allowed during predict".into()))
    }

    fn state(&mut self, payload: &str) -> Result<(), HarnessError> {
        self.states += 1;
        Ok(self.trace.log(self.dataset_id, self.example_id, EventKind::StateUpdate, payload, None)?)
    }
}

struct PredictIo<'a> {
    backend: &'a dyn LlmBackend,
    trace: &'a dyn TraceLog,
    ctx: CallContext,
    sample_index: u32,
    estimator: TokenEstimator,
    calls: u64,
    prompt_tokens: u64,
    prompt_chars: u64,
}

impl HarnessIo for PredictIo<'_> {
    fn complete(
        &mut self,
        messages: Vec<ChatMessage>,
        max_output_tokens: u32,
        temperature: f64,
    ) -> Result<LlmResponse, HarnessError> {
        let request = LlmRequest { messages, max_output_tokens, temperature, sample_index: self.sample_index };
        let response = self.backend.complete(&request, &self.ctx)?;
        record_response(self.trace, &self.ctx, &request, &response, self.estimator)?;
        let prompt = prompt_text(&request.messages);
        self.calls += 1;
        self.prompt_tokens += self.estimator.count(&prompt);
        self.prompt_chars += prompt.chars().count() as u64;
        Ok(response)
    }

    fn state(&mut self, payload: &str) -> Result<(), HarnessError> {
        Ok(self.trace.log(&self.ctx.dataset_id, &self.ctx.example_id, EventKind::StateUpdate, payload, None)?)
    }
}

/// Enforces lifecycle order and mediates every model call of a harness.
pub struct HarnessHandle {
    candidate_id: String,
    state: Lifecycle,
    llm_call_count: u64,
    program: Box<dyn HarnessProgram>,
    config: Option<TaskConfig>,
    estimator: TokenEstimator,
}

impl HarnessHandle {
    pub fn new(candidate_id: &str, program: Box<dyn HarnessProgram>, estimator: TokenEstimator) -> Self {
        Self {
            candidate_id: candidate_id.to_string(),
            state: Lifecycle::Created,
            llm_call_count: 0,
            program,
            config: None,
            estimator,
        }
    }

    pub fn candidate_id(&self) -> &str {
        &self.candidate_id
    }

    pub fn state(&self) -> Lifecycle {
        self.state
    }

    pub fn llm_call_count(&self) -> u64 {
        self.llm_call_count
    }

    fn require_initialized(&self, op: &str) -> Result<&TaskConfig, HarnessError> {
        match (&self.config, self.state) {
            (Some(config), Lifecycle::Initialized) => Ok(config),
            _ => Err(HarnessError::Lifecycle(format!("{op} on a {:?} harness", self.state))),
        }
    }

    pub fn init(&mut self, config: &TaskConfig) -> Result<(), HarnessError> {
        if self.state != Lifecycle::Created {
            return Err(HarnessError::Lifecycle(format!("init on a {:?} harness", self.state)));
        }
        config.validate()?;
        self.program.init(config)?;
        self.config = Some(config.clone());
        self.state = Lifecycle::Initialized;
        Ok(())
    }

    pub fn learn(&mut self, example: &Example, trace: &dyn TraceLog) -> Result<(), HarnessError> {
        let config = self.require_initialized("learn")?;
        let Some(label) = &example.label else {
            return Err(HarnessError::InvalidInput(format!("{} has no label", example.example_id)));
        };
        if let Some(labels) = &config.label_set {
            if !labels.contains(label) {
                return Err(HarnessError::InvalidInput(format!("label {label:?} is not in the label set")));
            }
        }
        let dataset_id = config.dataset_id.clone();
        let mut io = LearnIo { trace, dataset_id: &dataset_id, example_id: &example.example_id, states: 0 };
        self.program.learn(example, &mut io)?;
        if io.states == 0 {
            io.state(&format!("learned {}", example.example_id))?;
        }
        Ok(())
    }

    pub fn predict(
        &mut self,
        query: &Example,
        sample_index: u32,
        backend: &dyn LlmBackend,
        trace: &dyn TraceLog,
    ) -> Result<PredictOutcome, HarnessError> {
        let config = self.require_initialized("predict")?;
        let query = query.without_label();
        let mut io = PredictIo {
            backend,
            trace,
            ctx: CallContext { dataset_id: config.dataset_id.clone(), example_id: query.example_id.clone() },
            sample_index,
            estimator: self.estimator,
            calls: 0,
            prompt_tokens: 0,
            prompt_chars: 0,
        };
        let result = self.program.predict(&query, &mut io);
        self.llm_call_count += io.calls;
        let prediction = result?;
        if prediction.example_id != query.example_id {
            return Err(HarnessError::WrongExample { expected: query.example_id, got: prediction.example_id });
        }
        if prediction.label.trim().is_empty() {
            return Err(HarnessError::EmptyLabel);
        }
        Ok(PredictOutcome {
            prediction,
            calls: io.calls,
            prompt_tokens: io.prompt_tokens,
            prompt_chars: io.prompt_chars,
        })
    }

    pub fn shutdown(&mut self) -> Result<(), HarnessError> {
        if self.state == Lifecycle::ShutDown {
            return Err(HarnessError::Lifecycle("shutdown twice".into()));
        }
        self.state = Lifecycle::ShutDown;
        self.program.shutdown()
    }
}

/// Timing and logging for a harness started from a launch spec.
pub struct LaunchOptions {
    /// Bound on each single operation.
    pub op_timeout: Duration,
    /// Bound on the whole session.
    pub deadline: Option<Instant>,
    pub stderr: StderrSink,
}

impl Default for LaunchOptions {
    fn default() -> Self {
        Self { op_timeout: Duration::from_secs(300), deadline: None, stderr: StderrSink::Discard }
    }
}

/// Start the harness a launch spec describes: a built-in reference harness,
/// or the `entry` command run inside `harness_dir`.
pub fn instantiate(
    launch: &LaunchSpec,
    harness_dir: &Path,
    options: LaunchOptions,
) -> Result<Box<dyn HarnessProgram>, HarnessError> {
    match (&launch.native, &launch.entry) {
        (Some(name), None) => crate::reference::build_native(name).map_err(HarnessError::Spawn),
        (None, Some(entry)) => Ok(Box::new(SubprocessHarness::spawn(entry, harness_dir, options)?)),
        _ => Err(HarnessError::Spawn("launch spec needs exactly one of `entry` or `native`".into())),
    }
}
