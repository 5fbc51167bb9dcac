//! Append-only filesystem store of candidates, their scores and traces.
//!
//! ```text
//! <root>/run.json
//! <root>/skill.md
//! <root>/candidates/<id>/meta.json
//! <root>/candidates/<id>/harness/...
//! <root>/candidates/<id>/scores.json
//! <root>/candidates/<id>/traces/<dataset>/<example>.jsonl
//! <root>/proposals/iter_<t>/...
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::TokenEstimator;
use crate::metrics::{MetricVector, ObjectiveSpec};

pub const SCHEMA_VERSION: u32 = 1;
pub const LAUNCH_FILE: &str = "harness.toml";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("a run already exists at {0}")]
    RunAlreadyExists(PathBuf),
    #[error("no run at {0}")]
    NotARun(PathBuf),
    #[error("invalid run manifest: {0}")]
    InvalidManifest(String),
    #[error("unknown parent candidate {0}")]
    UnknownParent(String),
    #[error("unknown candidate {0}")]
    UnknownCandidate(String),
    #[error("candidate has no source files")]
    EmptyCandidate,
    #[error("invalid source path {0:?}")]
    InvalidSourcePath(PathBuf),
    #[error("candidate {0} already has scores")]
    AlreadyScored(String),
    #[error("candidate {id} is {status}, expected pending")]
    NotPending { id: String, status: Status },
    #[error("invalid score report: {0}")]
    InvalidReport(String),
    #[error("trace {path}: expected seq {expected}, got {got}")]
    SequenceGap { path: PathBuf, expected: u64, got: u64 },
    #[error("invalid trace event: {0}")]
    InvalidEvent(String),
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub objectives: Vec<ObjectiveSpec>,
    pub datasets: Vec<String>,
    #[serde(default)]
    pub search_config_snapshot: serde_json::Value,
    #[serde(default)]
    pub token_estimator: TokenEstimator,
    pub schema_version: u32,
}

impl RunManifest {
    pub fn new(run_id: &str, objectives: Vec<ObjectiveSpec>, datasets: Vec<String>) -> Self {
        Self {
            run_id: run_id.to_string(),
            created_at: now(),
            objectives,
            datasets,
            search_config_snapshot: serde_json::Value::Null,
            token_estimator: TokenEstimator::default(),
            schema_version: SCHEMA_VERSION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let safe = !self.run_id.is_empty()
            && self
                .run_id
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
        if !safe {
            return Err(StoreError::InvalidManifest(format!("run_id {:?} is not [a-z0-9_-]+", self.run_id)));
        }
        if self.schema_version < 1 {
            return Err(StoreError::InvalidManifest("schema_version must be >= 1".into()));
        }
        crate::metrics::check_objectives(&self.objectives)
            .map_err(|e| StoreError::InvalidManifest(e.to_string()))
    }
}

/// Millisecond-resolution timestamps keep records round-trippable through JSON.
pub fn now() -> DateTime<Utc> {
    let t = Utc::now();
    DateTime::from_timestamp_millis(t.timestamp_millis()).unwrap_or(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Proposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    ValidationFailed,
    Evaluated,
    Crashed,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Pending => "pending",
            Status::ValidationFailed => "validation_failed",
            Status::Evaluated => "evaluated",
            Status::Crashed => "crashed",
        })
    }
}

impl std::str::FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown status {s:?}"))
    }
}

/// How a candidate is started: an external command run inside its harness
/// directory, or a reference harness built into the orchestrator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub native: Option<String>,
}

impl LaunchSpec {
    pub fn parse_toml(text: &str) -> Result<Self, String> {
        let spec: LaunchSpec = toml::from_str(text).map_err(|e| e.to_string())?;
        match (&spec.entry, &spec.native) {
            (Some(entry), None) if !entry.is_empty() => Ok(spec),
            (None, Some(name)) if !name.is_empty() => Ok(spec),
            _ => Err("exactly one of a non-empty `entry` or `native` is required".into()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entry.is_none() && self.native.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate_id: String,
    pub parent_ids: Vec<String>,
    pub origin: Origin,
    pub iteration: u32,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_reason: Option<String>,
    pub source_files: Vec<SourceFile>,
    #[serde(default)]
    pub proposer_note: Option<String>,
    pub created_at: DateTime<Utc>,
    #[serde(flatten)]
    pub launch: LaunchSpec,
}

impl CandidateRecord {
    pub fn sequence(&self) -> u32 {
        parse_sequence(&self.candidate_id).unwrap_or(0)
    }

    /// The part of the id after the sequence number.
    pub fn slug(&self) -> &str {
        self.candidate_id.split_once('_').map(|(_, s)| s).unwrap_or("")
    }
}

fn parse_sequence(id: &str) -> Option<u32> {
    let rest = id.strip_prefix('c')?;
    let digits = rest.split('_').next()?;
    if digits.len() < 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Injective, filesystem-safe rendering of an identifier: `[A-Za-z0-9._-]`
/// kept, every other byte (and a leading dot) written as `%XX`.
pub fn sanitize(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for (i, b) in name.bytes().enumerate() {
        if b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-') || (b == b'.' && i > 0) {
            out.push(b as char);
        } else {
            let _ = write!(out, "%{b:02X}");
        }
    }
    if out.is_empty() {
        out.push('%');
    }
    out
}

pub fn slugify(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    let out = out.trim_end_matches('-').to_string();
    if out.is_empty() {
        "candidate".into()
    } else {
        out
    }
}

#[derive(Debug, Clone)]
pub struct NewCandidate {
    pub origin: Origin,
    pub parents: Vec<String>,
    pub sources: Vec<(PathBuf, Vec<u8>)>,
    pub note: Option<String>,
    pub iteration: u32,
    pub slug: String,
}

impl NewCandidate {
    /// Read every regular file under `dir` (sorted, relative paths).
    pub fn from_dir(origin: Origin, slug: &str, dir: &Path, skip: &[&str]) -> Result<Self> {
        Ok(Self {
            origin,
            parents: Vec::new(),
            sources: read_tree(dir, skip)?,
            note: None,
            iteration: 0,
            slug: slug.to_string(),
        })
    }
}

/// Regular files under `dir` as (relative path, bytes), sorted by path.
/// Names listed in `skip` are ignored at the top level.
pub fn read_tree(dir: &Path, skip: &[&str]) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    fn walk(base: &Path, dir: &Path, skip: &[&str], out: &mut Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .collect::<io::Result<Vec<_>>>()
            .map_err(io_err(dir))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            let rel = path.strip_prefix(base).expect("walk stays under base").to_path_buf();
            if dir == base && skip.iter().any(|s| entry.file_name() == *s) {
                continue;
            }
            let ft = entry.file_type().map_err(io_err(&path))?;
            if ft.is_dir() {
                walk(base, &path, skip, out)?;
            } else if ft.is_file() {
                out.push((rel, fs::read(&path).map_err(io_err(&path))?));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, skip, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub accuracy: f64,
    pub n_correct: u64,
    pub n_total: u64,
    pub mean_additional_context_tokens: f64,
    pub mean_additional_context_chars: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_dataset: BTreeMap<String, DatasetScore>,
    pub aggregate: MetricVector,
    pub wall_clock_seconds: f64,
}

pub const ACCURACY: &str = "accuracy";
pub const CTX_TOKENS: &str = "ctx_tokens";
pub const CTX_CHARS: &str = "ctx_chars";

impl ScoreReport {
    /// Aggregate = unweighted mean over datasets of accuracy and the two
    /// context measures.
    pub fn from_datasets(per_dataset: BTreeMap<String, DatasetScore>, wall_clock_seconds: f64) -> Self {
        let n = per_dataset.len().max(1) as f64;
        let mean = |f: fn(&DatasetScore) -> f64| per_dataset.values().map(f).sum::<f64>() / n;
        let aggregate = MetricVector::new([
            (ACCURACY, mean(|d| d.accuracy)),
            (CTX_TOKENS, mean(|d| d.mean_additional_context_tokens)),
            (CTX_CHARS, mean(|d| d.mean_additional_context_chars)),
        ])
        .unwrap_or_default();
        Self { per_dataset, aggregate, wall_clock_seconds }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.per_dataset.is_empty() {
            return Err("no datasets".into());
        }
        if !(self.wall_clock_seconds >= 0.0 && self.wall_clock_seconds.is_finite()) {
            return Err("wall_clock_seconds must be a non-negative number".into());
        }
        for (id, d) in &self.per_dataset {
            if d.n_total == 0 || d.n_correct > d.n_total {
                return Err(format!("{id}: {} correct of {}", d.n_correct, d.n_total));
            }
            if d.accuracy != d.n_correct as f64 / d.n_total as f64 {
                return Err(format!("{id}: accuracy {} != {}/{}", d.accuracy, d.n_correct, d.n_total));
            }
            if !d.mean_additional_context_tokens.is_finite() || !d.mean_additional_context_chars.is_finite() {
                return Err(format!("{id}: non-finite context measure"));
            }
        }
        let mean = self.per_dataset.values().map(|d| d.accuracy).sum::<f64>() / self.per_dataset.len() as f64;
        match self.aggregate.get(ACCURACY) {
            Some(a) if (a - mean).abs() <= 1e-9 => Ok(()),
            Some(a) => Err(format!("aggregate accuracy {a} != mean {mean}")),
            None => Err("aggregate lacks accuracy".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Prompt,
    ModelOutput,
    StateUpdate,
    ToolCall,
    Note,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub payload: String,
    pub token_count: Option<u64>,
    pub timestamp: DateTime<Utc>,
}

impl TraceEvent {
    pub fn new(seq: u64, kind: EventKind, payload: impl Into<String>, token_count: Option<u64>) -> Self {
        Self { seq, kind, payload: payload.into(), token_count, timestamp: now() }
    }
}

/// Sink for rollout events of one candidate.
pub trait TraceLog: Sync {
    fn log(
        &self,
        dataset_id: &str,
        example_id: &str,
        kind: EventKind,
        payload: &str,
        token_count: Option<u64>,
    ) -> Result<()>;
}

/// Discards every event.
pub struct NullTrace;

impl TraceLog for NullTrace {
    fn log(&self, _: &str, _: &str, _: EventKind, _: &str, _: Option<u64>) -> Result<()> {
        Ok(())
    }
}

/// Keeps events in memory, keyed by (dataset, example).
#[derive(Default)]
pub struct MemoryTrace {
    events: Mutex<BTreeMap<(String, String), Vec<TraceEvent>>>,
}

impl MemoryTrace {
    pub fn events(&self) -> BTreeMap<(String, String), Vec<TraceEvent>> {
        self.events.lock().expect("trace lock").clone()
    }
}

impl TraceLog for MemoryTrace {
    fn log(&self, dataset_id: &str, example_id: &str, kind: EventKind, payload: &str, token_count: Option<u64>) -> Result<()> {
        let mut events = self.events.lock().expect("trace lock");
        let list = events.entry((dataset_id.to_string(), example_id.to_string())).or_default();
        list.push(TraceEvent::new(list.len() as u64, kind, payload, token_count));
        Ok(())
    }
}

/// Traces of one candidate inside a run.
pub struct CandidateTrace<'a> {
    pub run: &'a Run,
    pub candidate_id: String,
}

impl TraceLog for CandidateTrace<'_> {
    fn log(&self, dataset_id: &str, example_id: &str, kind: EventKind, payload: &str, token_count: Option<u64>) -> Result<()> {
        self.run
            .log_event(&self.candidate_id, dataset_id, example_id, kind, payload, token_count)
            .map(|_| ())
    }
}

#[derive(Debug, Clone, Default)]
pub struct CandidateFilter {
    pub status: Option<Status>,
    pub origin: Option<Origin>,
}

impl CandidateFilter {
    pub fn evaluated() -> Self {
        Self { status: Some(Status::Evaluated), origin: None }
    }

    fn accepts(&self, r: &CandidateRecord) -> bool {
        self.status.is_none_or(|s| s == r.status) && self.origin.is_none_or(|o| o == r.origin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricDelta {
    pub name: String,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDiff {
    pub a: String,
    pub b: String,
    /// Unified diff over all source files; empty iff sources are identical.
    pub source_diff: String,
    /// Present iff both candidates are evaluated.
    pub metrics: Option<Vec<MetricDelta>>,
}

impl CandidateDiff {
    pub fn render(&self) -> String {
        let mut out = self.source_diff.clone();
        if !out.is_empty() && !out.ends_with('\n') {
            out.push('\n');
        }
        match &self.metrics {
            Some(deltas) => {
                let _ = writeln!(out, "# metrics {} -> {}", self.a, self.b);
                for d in deltas {
                    let _ = writeln!(out, "{}: {} -> {} ({:+})", d.name, d.a, d.b, d.b - d.a);
                }
            }
            None => {
                let _ = writeln!(out, "# metrics unavailable: both candidates must be evaluated");
            }
        }
        out
    }
}

/// Handle bound to one run directory. Shareable across threads.
pub struct Run {
    root: PathBuf,
    manifest: RunManifest,
    alloc: Mutex<()>,
    next_seq: Mutex<HashMap<PathBuf, u64>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("store documents serialize");
    bytes.push(b'\n');
    bytes
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt { path: path.to_path_buf(), message: e.to_string() })
}

fn check_relative(path: &Path) -> Result<()> {
    let ok = !path.as_os_str().is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidSourcePath(path.to_path_buf()))
    }
}

const DEFAULT_SKILL: &str = "\
# Run layout

- `run.json`: run manifest (objectives, datasets, config snapshot).
- `candidates/<id>/harness/`: candidate source; `harness.toml` names its launch command.
- `candidates/<id>/meta.json`: lineage, status and reason.
- `candidates/<id>/scores.json`: per-dataset accuracy and additional context.
- `candidates/<id>/outcomes/<dataset>.jsonl`: per-example prediction, gold label, correctness.
- `candidates/<id>/traces/<dataset>/<example>.jsonl`: prompts, model outputs, state updates.
- `proposals/iter_<t>/iteration.json`: what each iteration ingested, validated and evaluated.

Write each new candidate as a subdirectory of the drop directory you are given,
with an optional `parents.txt` (one candidate id per line) and `note.txt`.
";

impl Run {
    pub fn init(root: &Path, manifest: RunManifest) -> Result<Self> {
        manifest.validate()?;
        let manifest_path = root.join("run.json");
        if manifest_path.exists() {
            return Err(StoreError::RunAlreadyExists(root.to_path_buf()));
        }
        fs::create_dir_all(root.join("candidates")).map_err(io_err(root))?;
        fs::create_dir_all(root.join("proposals")).map_err(io_err(root))?;
        let skill = root.join("skill.md");
        if !skill.exists() {
            fs::write(&skill, DEFAULT_SKILL).map_err(io_err(&skill))?;
        }
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&manifest_path)
            .map_err(|e| match e.kind() {
                io::ErrorKind::AlreadyExists => StoreError::RunAlreadyExists(root.to_path_buf()),
                _ => StoreError::Io { path: manifest_path.clone(), source: e },
            })?;
        file.write_all(&to_json(&manifest)).map_err(io_err(&manifest_path))?;
        Self::open(root)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("run.json");
        if !manifest_path.exists() {
            return Err(StoreError::NotARun(root.to_path_buf()));
        }
        let manifest: RunManifest = read_json(&manifest_path)?;
        manifest.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            alloc: Mutex::new(()),
            next_seq: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn skill_path(&self) -> PathBuf {
        self.root.join("skill.md")
    }

    pub fn write_skill(&self, text: &str) -> Result<()> {
        let path = self.skill_path();
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn proposals_dir(&self) -> PathBuf {
        self.root.join("proposals")
    }

    pub fn iteration_dir(&self, t: u32) -> PathBuf {
        self.proposals_dir().join(format!("iter_{t}"))
    }

    pub fn candidate_dir(&self, id: &str) -> PathBuf {
        self.root.join("candidates").join(id)
    }

    pub fn harness_dir(&self, id: &str) -> PathBuf {
        self.candidate_dir(id).join("harness")
    }

    pub fn trace_dir(&self, id: &str, dataset_id: &str) -> PathBuf {
        self.candidate_dir(id).join("traces").join(sanitize(dataset_id))
    }

    pub fn trace_path(&self, id: &str, dataset_id: &str, example_id: &str) -> PathBuf {
        self.trace_dir(id, dataset_id).join(format!("{}.jsonl", sanitize(example_id)))
    }

    fn candidate_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("candidates");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|name| parse_sequence(name).is_some())
            .collect();
        ids.sort_by_key(|id| (parse_sequence(id), id.clone()));
        Ok(ids)
    }

    pub fn create_candidate(&self, spec: NewCandidate) -> Result<CandidateRecord> {
        if spec.sources.is_empty() {
            return Err(StoreError::EmptyCandidate);
        }
        for (path, _) in &spec.sources {
            check_relative(path)?;
        }
        let launch = spec
            .sources
            .iter()
            .find(|(p, _)| p == Path::new(LAUNCH_FILE))
            .and_then(|(_, bytes)| std::str::from_utf8(bytes).ok())
            .and_then(|text| LaunchSpec::parse_toml(text).ok())
            .unwrap_or_default();

        let _guard = self.alloc.lock().expect("allocation lock");
        let ids = self.candidate_ids()?;
        for parent in &spec.parents {
            if !ids.contains(parent) {
                return Err(StoreError::UnknownParent(parent.clone()));
            }
        }
        let seq = ids.iter().filter_map(|id| parse_sequence(id)).max().unwrap_or(0) + 1;
        let id = format!("c{seq:04}_{}", slugify(&spec.slug));
        let dir = self.candidate_dir(&id);
        // Built under a dot-name and renamed into place, so an interrupted
        // creation never leaves a partial candidate behind.
        let staging = self.root.join("candidates").join(format!(".staging-c{seq:04}"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        }
        fs::create_dir(&staging).map_err(io_err(&staging))?;
        let harness = staging.join("harness");
        let mut source_files = Vec::with_capacity(spec.sources.len());
        for (rel, bytes) in &spec.sources {
            let path = harness.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::write(&path, bytes).map_err(io_err(&path))?;
            #[cfg(unix)]
            if bytes.starts_with(b"#!") {
                use std::os::unix::fs::PermissionsExt;
                fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).map_err(io_err(&path))?;
            }
            source_files.push(SourceFile {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
            });
        }
        let record = CandidateRecord {
            candidate_id: id,
            parent_ids: spec.parents,
            origin: spec.origin,
            iteration: spec.iteration,
            status: Status::Pending,
            status_reason: None,
            source_files,
            proposer_note: spec.note,
            created_at: now(),
            launch,
        };
        fs::write(staging.join("meta.json"), to_json(&record)).map_err(io_err(&staging))?;
        if dir.exists() {
            return Err(StoreError::Corrupt { path: dir, message: "candidate directory already exists".into() });
        }
        fs::rename(&staging, &dir).map_err(io_err(&dir))?;
        Ok(record)
    }

    pub fn candidate(&self, id: &str) -> Result<CandidateRecord> {
        let path = self.candidate_dir(id).join("meta.json");
        if parse_sequence(id).is_none() || !path.exists() {
            return Err(StoreError::UnknownCandidate(id.to_string()));
        }
        read_json(&path)
    }

    /// Resolve an id or its unique `c####` prefix.
    pub fn resolve(&self, id_or_prefix: &str) -> Result<String> {
        if self.candidate_dir(id_or_prefix).join("meta.json").exists() {
            return Ok(id_or_prefix.to_string());
        }
        let matches: Vec<String> = self
            .candidate_ids()?
            .into_iter()
            .filter(|id| id.split('_').next() == Some(id_or_prefix))
            .collect();
        match matches.as_slice() {
            [one] => Ok(one.clone()),
            _ => Err(StoreError::UnknownCandidate(id_or_prefix.to_string())),
        }
    }

    pub fn set_status(&self, id: &str, status: Status, reason: Option<String>) -> Result<CandidateRecord> {
        let mut record = self.candidate(id)?;
        if status == Status::Evaluated && !self.candidate_dir(id).join("scores.json").exists() {
            return Err(StoreError::InvalidReport(format!("{id} has no scores")));
        }
        record.status = status;
        record.status_reason = reason;
        write_atomic(&self.candidate_dir(id).join("meta.json"), &to_json(&record))?;
        Ok(record)
    }

    pub fn write_scores(&self, id: &str, report: &ScoreReport) -> Result<CandidateRecord> {
        let record = self.candidate(id)?;
        let path = self.candidate_dir(id).join("scores.json");
        if path.exists() {
            return Err(StoreError::AlreadyScored(id.to_string()));
        }
        if record.status != Status::Pending {
            return Err(StoreError::NotPending { id: id.to_string(), status: record.status });
        }
        report.validate().map_err(StoreError::InvalidReport)?;
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                io::ErrorKind::AlreadyExists => StoreError::AlreadyScored(id.to_string()),
                _ => StoreError::Io { path: path.clone(), source: e },
            })?;
        file.write_all(&to_json(report)).map_err(io_err(&path))?;
        file.sync_all().map_err(io_err(&path))?;
        self.set_status(id, Status::Evaluated, None)
    }

    pub fn scores(&self, id: &str) -> Result<Option<ScoreReport>> {
        self.candidate(id)?;
        let path = self.candidate_dir(id).join("scores.json");
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    /// Append `event` to the (dataset, example) trace. Its seq must be the
    /// next one in that file.
    pub fn append_trace(&self, id: &str, dataset_id: &str, example_id: &str, event: &TraceEvent) -> Result<()> {
        if !self.candidate_dir(id).join("meta.json").exists() {
            return Err(StoreError::UnknownCandidate(id.to_string()));
        }
        if matches!(event.kind, EventKind::Prompt | EventKind::ModelOutput) && event.token_count.is_none() {
            return Err(StoreError::InvalidEvent(format!("{:?} event without token_count", event.kind)));
        }
        let path = self.trace_path(id, dataset_id, example_id);
        let mut seqs = self.next_seq.lock().expect("trace lock");
        let expected = match seqs.get(&path) {
            Some(&n) => n,
            None => read_trace_file(&path)?.len() as u64,
        };
        if event.seq != expected {
            return Err(StoreError::SequenceGap { path, expected, got: event.seq });
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut line = serde_json::to_string(event).expect("trace events serialize");
        line.push('\n');
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        seqs.insert(path, expected + 1);
        Ok(())
    }

    /// Append an event with the next free seq; returns that seq.
    pub fn log_event(
        &self,
        id: &str,
        dataset_id: &str,
        example_id: &str,
        kind: EventKind,
        payload: &str,
        token_count: Option<u64>,
    ) -> Result<u64> {
        let path = self.trace_path(id, dataset_id, example_id);
        let seq = {
            let seqs = self.next_seq.lock().expect("trace lock");
            match seqs.get(&path) {
                Some(&n) => n,
                None => {
                    drop(seqs);
                    read_trace_file(&path)?.len() as u64
                }
            }
        };
        self.append_trace(id, dataset_id, example_id, &TraceEvent::new(seq, kind, payload, token_count))?;
        Ok(seq)
    }

    pub fn read_trace(&self, id: &str, dataset_id: &str, example_id: &str) -> Result<Vec<TraceEvent>> {
        read_trace_file(&self.trace_path(id, dataset_id, example_id))
    }

    /// Every trace of a candidate: (dataset dir, example file stem) → events.
    pub fn traces(&self, id: &str) -> Result<BTreeMap<(String, String), Vec<TraceEvent>>> {
        let mut out = BTreeMap::new();
        let root = self.candidate_dir(id).join("traces");
        if !root.exists() {
            return Ok(out);
        }
        for ds in fs::read_dir(&root).map_err(io_err(&root))? {
            let ds = ds.map_err(io_err(&root))?;
            if !ds.path().is_dir() {
                continue;
            }
            let ds_name = ds.file_name().to_string_lossy().into_owned();
            for file in fs::read_dir(ds.path()).map_err(io_err(&ds.path()))? {
                let path = file.map_err(io_err(&ds.path()))?.path();
                if path.extension().is_some_and(|e| e == "jsonl") {
                    let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    out.insert((ds_name.clone(), stem), read_trace_file(&path)?);
                }
            }
        }
        Ok(out)
    }

    pub fn list_candidates(&self, filter: &CandidateFilter) -> Result<Vec<CandidateRecord>> {
        let mut out = Vec::new();
        for id in self.candidate_ids()? {
            if !self.candidate_dir(&id).join("meta.json").exists() {
                continue;
            }
            let record = self.candidate(&id)?;
            if filter.accepts(&record) {
                out.push(record);
            }
        }
        Ok(out)
    }

    /// Evaluated candidates with their aggregate metrics, in id order.
    pub fn evaluated(&self) -> Result<Vec<(CandidateRecord, ScoreReport)>> {
        let mut out = Vec::new();
        for record in self.list_candidates(&CandidateFilter::evaluated())? {
            if let Some(report) = self.scores(&record.candidate_id)? {
                out.push((record, report));
            }
        }
        Ok(out)
    }

    pub fn diff_candidates(&self, a: &str, b: &str) -> Result<CandidateDiff> {
        let ra = self.candidate(a)?;
        let rb = self.candidate(b)?;
        let files_a: BTreeMap<PathBuf, Vec<u8>> = read_tree(&self.harness_dir(a), &[])?.into_iter().collect();
        let files_b: BTreeMap<PathBuf, Vec<u8>> = read_tree(&self.harness_dir(b), &[])?.into_iter().collect();
        let mut paths: Vec<&PathBuf> = files_a.keys().chain(files_b.keys()).collect();
        paths.sort();
        paths.dedup();

        let mut source_diff = String::new();
        for path in paths {
            let old = files_a.get(path);
            let new = files_b.get(path);
            if old == new {
                continue;
            }
            let old_text = old.map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default();
            let new_text = new.map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default();
            let name = path.to_string_lossy();
            let old_header = if old.is_some() { format!("a/{name}") } else { "/dev/null".into() };
            let new_header = if new.is_some() { format!("b/{name}") } else { "/dev/null".into() };
            let diff = similar::TextDiff::from_lines(&old_text, &new_text);
            let hunks = diff.unified_diff().context_radius(3).header(&old_header, &new_header).to_string();
            if hunks.is_empty() {
                // differing bytes that decode to the same text
                let _ = writeln!(source_diff, "Binary files {old_header} and {new_header} differ");
            } else {
                source_diff.push_str(&hunks);
            }
        }

        let metrics = match (self.scores(a)?, self.scores(b)?) {
            (Some(sa), Some(sb)) if ra.status == Status::Evaluated && rb.status == Status::Evaluated => Some(
                sa.aggregate
                    .iter()
                    .filter_map(|(name, va)| {
                        sb.aggregate.get(name).map(|vb| MetricDelta { name: name.to_string(), a: va, b: vb })
                    })
                    .collect(),
            ),
            _ => None,
        };
        Ok(CandidateDiff { a: a.to_string(), b: b.to_string(), source_diff, metrics })
    }
}

/// Parse a trace file, ignoring a truncated final line. Missing file → [].
pub fn read_trace_file(path: &Path) -> Result<Vec<TraceEvent>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::Io { path: path.to_path_buf(), source: e }),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<io::Result<_>>().map_err(io_err(path))?;
    let mut events = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<TraceEvent>(line) {
            Ok(ev) => events.push(ev),
            Err(_) if i == last => break,
            Err(e) => {
                return Err(StoreError::Corrupt { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })
            }
        }
    }
    Ok(events)
}
