//! The outer loop: evaluate seeds, then repeatedly let an external proposer
//! read the run directory and drop new candidates, which are validated,
//! evaluated and logged. Returns the Pareto frontier of everything
//! evaluated.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use wait_timeout::ChildExt;

use crate::dataset::{Dataset, DatasetError, DatasetSpec, Split};
use crate::evaluator::{evaluate_and_record, EvalError, EvalOptions, Evaluator, Recording};
use crate::harness::{validate_candidate, GateOutcome, SmokeTask};
use crate::llm::{build_backend, BackendConfig, BackendError, LlmBackend, TokenEstimator};
use crate::metrics::{best_so_far_series, default_objectives, pareto_frontier, MetricVector, MetricsError, ObjectiveSpec};
use crate::store::{
    read_tree, CandidateRecord, NewCandidate, Origin, Run, RunManifest, Status, StoreError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub name: String,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerConfig {
    /// Argument vector; `{STORE_DIR}`, `{DROP_DIR}`, `{SKILL_PATH}`, `{K}`,
    /// `{ITERATION}` and `{CONFIG_DIR}` are substituted.
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default = "default_proposer_timeout")]
    pub timeout_s: u64,
    /// Copied into the run's `skill.md` when the run is created.
    #[serde(default)]
    pub skill_path: Option<PathBuf>,
}

fn default_proposer_timeout() -> u64 {
    3600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    #[serde(default = "default_gate_timeout")]
    pub timeout_s: f64,
}

fn default_gate_timeout() -> f64 {
    30.0
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { timeout_s: default_gate_timeout() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    #[serde(default = "default_op_timeout")]
    pub op_timeout_s: f64,
    /// Evaluate the candidates of one iteration concurrently.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

fn default_op_timeout() -> f64 {
    300.0
}

fn default_true() -> bool {
    true
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { op_timeout_s: default_op_timeout(), parallel: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub run_id: String,
    pub iterations: u32,
    pub candidates_per_iteration: u32,
    pub seeds: Vec<SeedSpec>,
    #[serde(default = "default_objectives")]
    pub objectives: Vec<ObjectiveSpec>,
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub proposer: Option<ProposerConfig>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub token_estimator: TokenEstimator,
    /// Directory the config was loaded from; placeholder `{CONFIG_DIR}`.
    #[serde(default)]
    pub config_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("seed {name} failed: {reason}")]
    SeedFailure { name: String, reason: String },
}

type Result<T, E = SearchError> = std::result::Result<T, E>;

impl SearchConfig {
    /// Parse TOML, or JSON for a `.json` file; relative paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SearchError::Config(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut config: SearchConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| SearchError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| SearchError::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
        config.resolve_paths(&base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for seed in &mut self.seeds {
            join(&mut seed.dir);
        }
        for dataset in &mut self.datasets {
            dataset.resolve_paths(base);
        }
        if let Some(skill) = self.proposer.as_mut().and_then(|p| p.skill_path.as_mut()) {
            join(skill);
        }
        self.config_dir = base.to_path_buf();
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SearchError::Config(m.into()));
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if self.datasets.is_empty() {
            return fail("at least one dataset is required");
        }
        if self.candidates_per_iteration == 0 {
            return fail("candidates_per_iteration must be at least 1");
        }
        if self.iterations > 0 && self.proposer.as_ref().is_none_or(|p| p.command.is_empty()) {
            return fail("a proposer command is required when iterations > 0");
        }
        if self.proposer.as_ref().is_some_and(|p| p.timeout_s == 0) {
            return fail("proposer timeout_s must be positive");
        }
        if !(self.validation.timeout_s > 0.0 && self.evaluation.op_timeout_s > 0.0) {
            return fail("timeouts must be positive");
        }
        if let Some(d) = self.datasets.iter().find(|d| d.search.is_none()) {
            return Err(SearchError::Config(format!("dataset {} has no search split", d.id)));
        }
        crate::metrics::check_objectives(&self.objectives)?;
        self.backend.validate()?;
        Ok(())
    }

    pub fn manifest(&self) -> RunManifest {
        let mut manifest =
            RunManifest::new(&self.run_id, self.objectives.clone(), self.datasets.iter().map(|d| d.id.clone()).collect());
        manifest.search_config_snapshot = serde_json::to_value(self).unwrap_or_default();
        manifest.token_estimator = self.token_estimator;
        manifest
    }

    /// Search-split datasets; test files are never opened.
    pub fn search_datasets(&self) -> Result<Vec<Dataset>> {
        Ok(self.datasets.iter().map(|d| d.load(Split::Search)).collect::<Result<_, _>>()?)
    }

    /// Open the run at `root`, creating it (and installing the skill file)
    /// if absent.
    pub fn open_run(&self, root: &Path) -> Result<Run> {
        if root.join("run.json").exists() {
            let run = Run::open(root)?;
            if run.manifest().run_id != self.run_id {
                return Err(SearchError::Config(format!(
                    "{} holds run {}, not {}",
                    root.display(),
                    run.manifest().run_id,
                    self.run_id
                )));
            }
            return Ok(run);
        }
        let run = Run::init(root, self.manifest())?;
        if let Some(skill) = self.proposer.as_ref().and_then(|p| p.skill_path.as_ref()) {
            let text = fs::read_to_string(skill).map_err(|e| SearchError::Config(format!("{}: {e}", skill.display())))?;
            run.write_skill(&text)?;
        }
        Ok(run)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    /// Return after this iteration completes, as if interrupted.
    pub stop_after_iteration: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierEntry {
    pub record: CandidateRecord,
    pub metrics: MetricVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub frontier: Vec<FrontierEntry>,
    /// Candidates with scores, in evaluation (id) order.
    pub evaluated: Vec<String>,
    /// Running best of the first objective over `evaluated`.
    pub best_so_far: Vec<f64>,
    pub iterations_completed: u32,
}

/// Pareto frontier over the evaluated candidates of `run` under its
/// manifest objectives.
pub fn run_frontier(run: &Run) -> Result<Vec<FrontierEntry>> {
    let objectives = &run.manifest().objectives;
    let evaluated = run.evaluated()?;
    let points: Vec<(String, MetricVector)> = evaluated
        .iter()
        .map(|(rec, report)| Ok((rec.candidate_id.clone(), report.aggregate.project(objectives)?)))
        .collect::<Result<_, MetricsError>>()?;
    let records: BTreeMap<&str, &CandidateRecord> = evaluated.iter().map(|(r, _)| (r.candidate_id.as_str(), r)).collect();
    Ok(pareto_frontier(&points, objectives)?
        .into_iter()
        .map(|(id, metrics)| FrontierEntry { record: records[id.as_str()].clone(), metrics })
        .collect())
}

/// Running best of the first objective over evaluated candidates in id order.
pub fn run_best_so_far(run: &Run) -> Result<(Vec<String>, Vec<f64>)> {
    let primary = run.manifest().objectives.first().cloned().ok_or(MetricsError::EmptySeries)?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (rec, report) in run.evaluated()? {
        let value = report
            .aggregate
            .get(&primary.name)
            .ok_or_else(|| MetricsError::ObjectiveMismatch(primary.name.clone()))?;
        ids.push(rec.candidate_id);
        values.push(value);
    }
    if values.is_empty() {
        return Ok((ids, values));
    }
    Ok((ids, best_so_far_series(&values, primary.direction)?))
}

pub const ITERATION_LOG: &str = "iteration.json";
pub const TRANSCRIPT: &str = "proposer_transcript.txt";
const PROPOSER_STDERR: &str = "proposer_stderr.txt";
const PROPOSER_LOG: &str = "proposer.json";
const CANDIDATE_META: [&str; 2] = ["parents.txt", "note.txt"];

struct Loop<'a> {
    config: &'a SearchConfig,
    run: &'a Run,
    datasets: Vec<Dataset>,
    smoke: SmokeTask,
    evaluator: Evaluator,
    backend: std::sync::Arc<dyn LlmBackend>,
}

/// What became of one candidate in an iteration.
#[derive(Debug, Clone, Serialize)]
struct CandidateLog {
    candidate_id: String,
    status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
}

impl Loop<'_> {
    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            op_timeout: Duration::from_secs_f64(self.config.evaluation.op_timeout_s),
            recording: Recording::Store,
        }
    }

    /// Validate, then evaluate if the gate passed. Candidates already past
    /// `pending` are left alone.
    fn process(&self, candidate_id: &str) -> Result<CandidateLog> {
        let record = self.run.candidate(candidate_id)?;
        if record.status == Status::Pending {
            let timeout = Duration::from_secs_f64(self.config.validation.timeout_s);
            if let GateOutcome::Pass = validate_candidate(self.run, candidate_id, &self.smoke, timeout)? {
                match evaluate_and_record(
                    &self.evaluator,
                    self.run,
                    candidate_id,
                    &self.datasets,
                    self.backend.as_ref(),
                    &self.eval_options(),
                ) {
                    Ok(_) | Err(EvalError::Harness { .. }) => {}
                    Err(EvalError::Store(e)) => return Err(e.into()),
                }
            }
        }
        let record = self.run.candidate(candidate_id)?;
        Ok(CandidateLog { candidate_id: record.candidate_id, status: record.status, reason: record.status_reason })
    }

    fn process_all(&self, ids: &[String]) -> Result<Vec<CandidateLog>> {
        if !self.config.evaluation.parallel || ids.len() < 2 {
            return ids.iter().map(|id| self.process(id)).collect();
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = ids.iter().map(|id| scope.spawn(move || self.process(id))).collect();
            handles.into_iter().map(|h| h.join().expect("candidate worker panicked")).collect()
        })
    }

    fn seeds(&self) -> Result<()> {
        let existing = self.run.list_candidates(&Default::default())?;
        let mut ids = Vec::new();
        for seed in &self.config.seeds {
            let slug = crate::store::slugify(&seed.name);
            let found = existing.iter().find(|r| r.origin == Origin::Seed && r.slug() == slug);
            let id = match found {
                Some(record) => record.candidate_id.clone(),
                None => {
                    let spec = NewCandidate::from_dir(Origin::Seed, &seed.name, &seed.dir, &[])?;
                    self.run.create_candidate(spec)?.candidate_id
                }
            };
            ids.push((seed.name.clone(), id));
        }
        let order: Vec<String> = ids.iter().map(|(_, id)| id.clone()).collect();
        let logs = self.process_all(&order)?;
        for ((name, _), log) in ids.iter().zip(logs) {
            if log.status != Status::Evaluated {
                return Err(SearchError::SeedFailure {
                    name: name.clone(),
                    reason: log.reason.unwrap_or_else(|| log.status.to_string()),
                });
            }
        }
        Ok(())
    }

    fn substitute(&self, arg: &str, t: u32, drop_dir: &Path) -> String {
        let k = self.config.candidates_per_iteration.to_string();
        arg.replace("{STORE_DIR}", &self.run.root().to_string_lossy())
            .replace("{DROP_DIR}", &drop_dir.to_string_lossy())
            .replace("{SKILL_PATH}", &self.run.skill_path().to_string_lossy())
            .replace("{K}", &k)
            .replace("{ITERATION}", &t.to_string())
            .replace("{CONFIG_DIR}", &self.config.config_dir.to_string_lossy())
    }

    /// Run the proposer for iteration `t`; its stdout becomes the transcript.
    fn invoke_proposer(&self, t: u32, drop_dir: &Path) -> Result<(), String> {
        let proposer = self.config.proposer.as_ref().ok_or("no proposer configured")?;
        let args: Vec<String> = proposer.command.iter().map(|a| self.substitute(a, t, drop_dir)).collect();
        let (program, rest) = args.split_first().ok_or("empty proposer command")?;
        let transcript = File::create(drop_dir.join(TRANSCRIPT)).map_err(|e| e.to_string())?;
        let stderr = File::create(drop_dir.join(PROPOSER_STDERR)).map_err(|e| e.to_string())?;
        let mut child = Command::new(program)
            .args(rest)
            .current_dir(self.run.root())
            .env("MH_STORE_DIR", self.run.root())
            .env("MH_DROP_DIR", drop_dir)
            .env("MH_SKILL_PATH", self.run.skill_path())
            .env("MH_K", self.config.candidates_per_iteration.to_string())
            .env("MH_ITERATION", t.to_string())
            .env("MH_CONFIG_DIR", &self.config.config_dir)
            .stdin(Stdio::null())
            .stdout(transcript)
            .stderr(stderr)
            .spawn()
            .map_err(|e| format!("cannot start {program}: {e}"))?;
        match child.wait_timeout(Duration::from_secs(proposer.timeout_s)).map_err(|e| e.to_string())? {
            Some(status) if status.success() => Ok(()),
            Some(status) => Err(format!("proposer exited with {status}")),
            None => {
                let _ = child.kill();
                let _ = child.wait();
                Err(format!("proposer exceeded {}s", proposer.timeout_s))
            }
        }
    }

    /// Turn the first k subdirectories of the drop dir (name order) into
    /// pending candidates. A subdirectory already stored for iteration `t`
    /// is reused. Returns (candidate ids, ignored (name, reason)).
    fn ingest(&self, t: u32, drop_dir: &Path) -> Result<(Vec<String>, Vec<(String, String)>)> {
        let mut names: Vec<String> = fs::read_dir(drop_dir)
            .map_err(|source| StoreError::Io { path: drop_dir.into(), source })?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        let existing: Vec<CandidateRecord> = self
            .run
            .list_candidates(&Default::default())?
            .into_iter()
            .filter(|r| r.origin == Origin::Proposed && r.iteration == t)
            .collect();
        let k = self.config.candidates_per_iteration as usize;
        let mut ingested = Vec::new();
        let mut ignored = Vec::new();
        for (n, name) in names.iter().enumerate() {
            if n >= k {
                ignored.push((name.clone(), format!("over the per-iteration cap of {k}")));
                continue;
            }
            if let Some(record) = existing.iter().find(|r| r.slug() == crate::store::slugify(name)) {
                ingested.push(record.candidate_id.clone());
                continue;
            }
            let dir = drop_dir.join(name);
            let sources = read_tree(&dir, &CANDIDATE_META)?;
            if sources.is_empty() {
                ignored.push((name.clone(), StoreError::EmptyCandidate.to_string()));
                continue;
            }
            let read = |file: &str| fs::read_to_string(dir.join(file)).ok();
            let declared: Vec<String> = read("parents.txt")
                .map(|text| text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
                .unwrap_or_default();
            // Parents may be named by full id or unique `c####` prefix.
            let parents: Vec<String> = declared.iter().map(|p| self.run.resolve(p).unwrap_or_else(|_| p.clone())).collect();
            let note = read("note.txt").map(|n| n.trim().to_string()).filter(|n| !n.is_empty());
            let spec = NewCandidate { origin: Origin::Proposed, parents, sources, note, iteration: t, slug: name.clone() };
            match self.run.create_candidate(spec) {
                Ok(record) => ingested.push(record.candidate_id),
                Err(e @ (StoreError::UnknownParent(_) | StoreError::InvalidSourcePath(_))) => {
                    ignored.push((name.clone(), e.to_string()))
                }
                Err(e) => return Err(e.into()),
            }
        }
        for (name, reason) in &ignored {
            tracing::info!(iteration = t, %name, %reason, "proposal ignored");
        }
        Ok((ingested, ignored))
    }

    /// One iteration. The proposer's result is recorded in
    /// `proposer.json` before ingestion, so an interrupted iteration resumes
    /// from ingestion rather than proposing again; a drop directory without
    /// that marker is discarded and the proposer rerun.
    fn iteration(&self, t: u32) -> Result<()> {
        let drop_dir = self.run.iteration_dir(t);
        let marker = drop_dir.join(PROPOSER_LOG);
        let started = Instant::now();
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StoreError::Io { path, source }
        };
        let proposer_error: Option<String> = if marker.exists() {
            let text = fs::read_to_string(&marker).map_err(io_err(&marker))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| StoreError::Corrupt { path: marker.clone(), message: e.to_string() })?;
            value["error"].as_str().map(str::to_string)
        } else {
            if drop_dir.exists() {
                fs::remove_dir_all(&drop_dir).map_err(io_err(&drop_dir))?;
            }
            fs::create_dir_all(&drop_dir).map_err(io_err(&drop_dir))?;
            let error = self.invoke_proposer(t, &drop_dir).err();
            if let Some(e) = &error {
                tracing::warn!(iteration = t, error = %e, "proposer failed");
            }
            let body = json!({"error": error, "seconds": started.elapsed().as_secs_f64()});
            fs::write(&marker, body.to_string()).map_err(io_err(&marker))?;
            error
        };
        let (ingested, ignored) = match proposer_error {
            None => self.ingest(t, &drop_dir)?,
            Some(_) => (Vec::new(), Vec::new()),
        };
        let outcomes = self.process_all(&ingested)?;
        let status = match (&proposer_error, ingested.is_empty()) {
            (Some(_), _) => "proposer_failed",
            (None, true) => "barren",
            (None, false) => "completed",
        };
        let log = json!({
            "iteration": t,
            "status": status,
            "proposer_error": proposer_error,
            "candidates": outcomes,
            "ignored": ignored.iter().map(|(name, reason)| json!({"name": name, "reason": reason})).collect::<Vec<_>>(),
        });
        let path = drop_dir.join(ITERATION_LOG);
        let body = serde_json::to_vec_pretty(&log).expect("iteration log serializes");
        let tmp = drop_dir.join(".iteration.json.tmp");
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(())
    }
}

/// Seeds first, then iterations 1..=N. Iterations with an `iteration.json`
/// are complete and skipped, so re-running resumes an interrupted search.
pub fn run_search(config: &SearchConfig, run: &Run, options: &SearchOptions) -> Result<SearchOutcome> {
    config.validate()?;
    let datasets = config.search_datasets()?;
    let first = &datasets[0];
    let pool: Vec<_> = first.train.iter().chain(&first.test).cloned().collect();
    let smoke = SmokeTask::from_examples(first.task_config(), &pool)
        .ok_or_else(|| SearchError::Config(format!("dataset {} has no examples", first.dataset_id)))?;
    let state = Loop {
        config,
        run,
        datasets,
        smoke,
        evaluator: Evaluator::new(config.token_estimator),
        backend: build_backend(&config.backend, config.token_estimator, Some(run))?,
    };
    state.seeds()?;
    let mut completed = 0;
    for t in 1..=config.iterations {
        if !run.iteration_dir(t).join(ITERATION_LOG).exists() {
            state.iteration(t)?;
        }
        completed = t;
        if options.stop_after_iteration == Some(t) {
            break;
        }
    }
    let (evaluated, best_so_far) = run_best_so_far(run)?;
    Ok(SearchOutcome { frontier: run_frontier(run)?, evaluated, best_so_far, iterations_completed: completed })
}

/// Test-double proposer: iteration `t` copies queue entries
/// `(t-1)·k .. t·k` (subdirectories of `queue`, name order) into `drop_dir`.
/// Stateless, so an interrupted iteration re-proposes the same entries.
pub fn propose_from_queue(queue: &Path, drop_dir: &Path, t: u32, k: u32) -> std::io::Result<Vec<String>> {
    let mut entries: Vec<PathBuf> =
        fs::read_dir(queue)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    entries.sort();
    let start = (t.saturating_sub(1) as usize).saturating_mul(k as usize);
    fs::create_dir_all(drop_dir)?;
    let mut dropped = Vec::new();
    for entry in entries.iter().skip(start).take(k as usize) {
        let name = entry.file_name().unwrap_or_default().to_string_lossy().into_owned();
        copy_tree(entry, &drop_dir.join(&name))?;
        dropped.push(name);
    }
    Ok(dropped)
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}
