//! Pre-evaluation smoke check: init, a few learns and one predict must all
//! succeed on a tiny task within one wall-clock budget.

use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::{instantiate, Example, HarnessError, HarnessHandle, LaunchOptions, StderrSink, TaskConfig, TaskKind};
use crate::llm::{MockBackend, TokenEstimator};
use crate::store::{read_tree, LaunchSpec, NullTrace, Run, Status, StoreError, LAUNCH_FILE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateFailure {
    EmptySources,
    MissingEntry(String),
    SpawnFailed(String),
    NoReady(String),
    Timeout(String),
    InvalidLabel(String),
    MalformedMessage(String),
    Crash(String),
    ProtocolError(String),
}

impl GateFailure {
    pub fn code(&self) -> &'static str {
        match self {
            GateFailure::EmptySources => "empty_sources",
            GateFailure::MissingEntry(_) => "missing_entry",
            GateFailure::SpawnFailed(_) => "spawn_failed",
            GateFailure::NoReady(_) => "no_ready",
            GateFailure::Timeout(_) => "timeout",
            GateFailure::InvalidLabel(_) => "invalid_label",
            GateFailure::MalformedMessage(_) => "malformed_message",
            GateFailure::Crash(_) => "crash",
            GateFailure::ProtocolError(_) => "protocol_error",
        }
    }

    fn detail(&self) -> &str {
        match self {
            GateFailure::EmptySources => "",
            GateFailure::MissingEntry(d)
            | GateFailure::SpawnFailed(d)
            | GateFailure::NoReady(d)
            | GateFailure::Timeout(d)
            | GateFailure::InvalidLabel(d)
            | GateFailure::MalformedMessage(d)
            | GateFailure::Crash(d)
            | GateFailure::ProtocolError(d) => d,
        }
    }
}

impl fmt::Display for GateFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.detail().is_empty() {
            f.write_str(self.code())
        } else {
            write!(f, "{}: {}", self.code(), self.detail())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateOutcome {
    Pass,
    Fail(GateFailure),
}

impl GateOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, GateOutcome::Pass)
    }
}

/// A tiny task: at most three labeled examples and one query.
#[derive(Debug, Clone)]
pub struct SmokeTask {
    pub config: TaskConfig,
    pub learn: Vec<Example>,
    pub query: Example,
}

impl SmokeTask {
    /// First three examples of `pool` to learn, the next one (or the first)
    /// as query.
    pub fn from_examples(config: TaskConfig, pool: &[Example]) -> Option<Self> {
        let learn: Vec<Example> = pool.iter().filter(|e| e.label.is_some()).take(3).cloned().collect();
        let query = pool.get(learn.len()).or(pool.first())?.without_label();
        let learn = if config.task_kind == TaskKind::Qa { Vec::new() } else { learn };
        Some(Self { config, learn, query })
    }

    /// The mock model always answers the first label (or "0" without labels).
    fn backend(&self) -> MockBackend {
        let answer = self.config.labels().first().cloned().unwrap_or_else(|| "0".into());
        MockBackend::constant(&answer)
    }
}

fn classify(phase: &'static str, err: HarnessError) -> GateFailure {
    let detail = err.to_string();
    match (phase, err) {
        (_, HarnessError::Timeout { .. }) => GateFailure::Timeout(detail),
        (_, HarnessError::Malformed(_)) => GateFailure::MalformedMessage(detail),
        (_, HarnessError::Spawn(_)) => GateFailure::SpawnFailed(detail),
        ("init", _) => GateFailure::NoReady(detail),
        (_, HarnessError::Exited { .. }) => GateFailure::Crash(detail),
        (_, other) if !other.is_protocol_error() => GateFailure::Crash(detail),
        _ => GateFailure::ProtocolError(detail),
    }
}

fn run_smoke(launch: &LaunchSpec, dir: &Path, smoke: &SmokeTask, timeout: Duration) -> Result<(), GateFailure> {
    let deadline = Instant::now() + timeout;
    let options = LaunchOptions {
        op_timeout: timeout,
        deadline: Some(deadline),
        stderr: StderrSink::Memory(Arc::new(Mutex::new(Vec::new()))),
    };
    let program = instantiate(launch, dir, options).map_err(|e| classify("spawn", e))?;
    let mut handle = HarnessHandle::new("smoke", program, TokenEstimator::default());
    let backend = smoke.backend();
    let trace = NullTrace;
    let over = || Instant::now() > deadline;

    handle.init(&smoke.config).map_err(|e| classify("init", e))?;
    for example in &smoke.learn {
        handle.learn(example, &trace).map_err(|e| classify("learn", e))?;
        if over() {
            return Err(GateFailure::Timeout("smoke sequence exceeded its budget".into()));
        }
    }
    let outcome = handle.predict(&smoke.query, 0, &backend, &trace).map_err(|e| classify("predict", e))?;
    if over() {
        return Err(GateFailure::Timeout("smoke sequence exceeded its budget".into()));
    }
    if let Some(labels) = &smoke.config.label_set {
        let predicted = crate::evaluator::normalize_label(&outcome.prediction.label);
        if !labels.iter().any(|l| crate::evaluator::normalize_label(l) == predicted) {
            return Err(GateFailure::InvalidLabel(format!("predicted {:?}", outcome.prediction.label)));
        }
    }
    let _ = handle.shutdown();
    Ok(())
}

/// Gate a harness source directory.
pub fn validate_dir(dir: &Path, smoke: &SmokeTask, timeout: Duration) -> GateOutcome {
    let files = read_tree(dir, &[]).unwrap_or_default();
    if files.is_empty() {
        return GateOutcome::Fail(GateFailure::EmptySources);
    }
    let launch = match files.iter().find(|(p, _)| p == Path::new(LAUNCH_FILE)) {
        None => return GateOutcome::Fail(GateFailure::MissingEntry(format!("no {LAUNCH_FILE}"))),
        Some((_, bytes)) => match LaunchSpec::parse_toml(&String::from_utf8_lossy(bytes)) {
            Ok(spec) => spec,
            Err(e) => return GateOutcome::Fail(GateFailure::MissingEntry(e)),
        },
    };
    match run_smoke(&launch, dir, smoke, timeout) {
        Ok(()) => GateOutcome::Pass,
        Err(failure) => GateOutcome::Fail(failure),
    }
}

/// Gate a stored candidate; on failure its status becomes
/// `validation_failed` with the reason recorded. Nothing else is written.
pub fn validate_candidate(
    run: &Run,
    candidate_id: &str,
    smoke: &SmokeTask,
    timeout: Duration,
) -> Result<GateOutcome, StoreError> {
    run.candidate(candidate_id)?;
    let outcome = validate_dir(&run.harness_dir(candidate_id), smoke, timeout);
    if let GateOutcome::Fail(failure) = &outcome {
        run.set_status(candidate_id, Status::ValidationFailed, Some(failure.to_string()))?;
    }
    Ok(outcome)
}
