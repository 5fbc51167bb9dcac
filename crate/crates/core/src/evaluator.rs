//! Scoring a harness: online classification and sampled QA, with
//! additional-context accounting against the zero-shot template.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::harness::{instantiate, Example, HarnessError, HarnessHandle, LaunchOptions, StderrSink, TaskKind};
use crate::llm::{LlmBackend, TokenEstimator};
use crate::reference::canonical_prompt;
use crate::store::{sanitize, CandidateTrace, DatasetScore, MemoryTrace, Run, ScoreReport, Status, StoreError, TraceLog};

/// Classification label match key: trimmed and case-folded.
pub fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Body of the last top-level `\boxed{...}` in `text`, unwrapped until no
/// box remains; an unterminated box runs to the end.
fn innermost_boxed(text: &str) -> Option<&str> {
    const OPEN: &str = "\\boxed{";
    let start = text.rfind(OPEN)? + OPEN.len();
    let mut depth = 1usize;
    let mut end = text.len();
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    end = start + i;
                    break;
                }
            }
            _ => {}
        }
    }
    let inner = &text[start..end];
    Some(innermost_boxed(inner).unwrap_or(inner))
}

/// QA answer match key.
pub fn normalize_answer(text: &str) -> String {
    let body = innermost_boxed(text).unwrap_or(text);
    let stripped = body.trim().trim_matches('$').trim();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub example_id: String,
    pub sample_index: u32,
    pub predicted: String,
    pub gold: String,
    pub correct: bool,
    pub calls: u64,
    pub additional_context_tokens: i64,
    pub additional_context_chars: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub dataset_id: String,
    pub score: DatasetScore,
    pub per_example: Vec<ExampleOutcome>,
}

impl EvaluationResult {
    fn from_outcomes(dataset_id: &str, per_example: Vec<ExampleOutcome>) -> Self {
        let n_total = per_example.len() as u64;
        let n_correct = per_example.iter().filter(|o| o.correct).count() as u64;
        let mean = |f: fn(&ExampleOutcome) -> i64| {
            if n_total == 0 {
                0.0
            } else {
                per_example.iter().map(f).sum::<i64>() as f64 / n_total as f64
            }
        };
        let score = DatasetScore {
            accuracy: if n_total == 0 { 0.0 } else { n_correct as f64 / n_total as f64 },
            n_correct,
            n_total,
            mean_additional_context_tokens: mean(|o| o.additional_context_tokens),
            mean_additional_context_chars: mean(|o| o.additional_context_chars),
        };
        Self { dataset_id: dataset_id.into(), score, per_example }
    }
}

/// Runs the protocols; memoizes the zero-shot baseline per example.
pub struct Evaluator {
    estimator: TokenEstimator,
    baselines: Mutex<HashMap<(String, String), (u64, u64)>>,
}

impl Evaluator {
    pub fn new(estimator: TokenEstimator) -> Self {
        Self { estimator, baselines: Mutex::new(HashMap::new()) }
    }

    pub fn estimator(&self) -> TokenEstimator {
        self.estimator
    }

    /// (tokens, chars) of the canonical zero-shot prompt for `example`.
    fn baseline(&self, dataset: &Dataset, example: &Example) -> (u64, u64) {
        let key = (dataset.dataset_id.clone(), example.example_id.clone());
        if let Some(hit) = self.baselines.lock().expect("baseline lock").get(&key) {
            return *hit;
        }
        let prompt = canonical_prompt(&dataset.task_config(), &example.input_text);
        let value = (self.estimator.count(&prompt), prompt.chars().count() as u64);
        self.baselines.lock().expect("baseline lock").insert(key, value);
        value
    }

    pub fn baseline_prompt_tokens(&self, dataset: &Dataset, example: &Example) -> u64 {
        self.baseline(dataset, example).0
    }

    fn is_correct(kind: TaskKind, predicted: &str, gold: &str) -> bool {
        match kind {
            TaskKind::OnlineClassification => normalize_label(predicted) == normalize_label(gold),
            TaskKind::Qa => normalize_answer(predicted) == normalize_answer(gold),
        }
    }

    /// Initialize, deliver every train example in order, then predict each
    /// scored example (`n_samples_per_item` times for QA).
    pub fn evaluate(
        &self,
        handle: &mut HarnessHandle,
        dataset: &Dataset,
        backend: &dyn LlmBackend,
        trace: &dyn TraceLog,
    ) -> Result<EvaluationResult, HarnessError> {
        handle.init(&dataset.task_config())?;
        for example in &dataset.train {
            handle.learn(example, trace)?;
        }
        let samples = match dataset.task_kind {
            TaskKind::OnlineClassification => 1,
            TaskKind::Qa => dataset.n_samples_per_item.max(1),
        };
        let mut outcomes = Vec::with_capacity(dataset.test.len() * samples as usize);
        for example in &dataset.test {
            let (base_tokens, base_chars) = self.baseline(dataset, example);
            let gold = example.label.clone().unwrap_or_default();
            for sample_index in 0..samples {
                let out = handle.predict(example, sample_index, backend, trace)?;
                outcomes.push(ExampleOutcome {
                    example_id: example.example_id.clone(),
                    sample_index,
                    correct: Self::is_correct(dataset.task_kind, &out.prediction.label, &gold),
                    predicted: out.prediction.label,
                    gold: gold.clone(),
                    calls: out.calls,
                    additional_context_tokens: out.prompt_tokens as i64 - base_tokens as i64,
                    additional_context_chars: out.prompt_chars as i64 - base_chars as i64,
                });
            }
        }
        Ok(EvaluationResult::from_outcomes(&dataset.dataset_id, outcomes))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("candidate {candidate_id} failed on {dataset_id}: {source}")]
    Harness { candidate_id: String, dataset_id: String, source: HarnessError },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Whether an evaluation writes traces and outcomes into the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    Store,
    Discard,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub op_timeout: Duration,
    pub recording: Recording,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { op_timeout: Duration::from_secs(300), recording: Recording::Store }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEvaluation {
    pub report: ScoreReport,
    pub results: Vec<EvaluationResult>,
}

/// Evaluate a stored candidate on every dataset, one fresh harness instance
/// per dataset. Nothing about the candidate's status changes.
pub fn evaluate_candidate(
    evaluator: &Evaluator,
    run: &Run,
    candidate_id: &str,
    datasets: &[Dataset],
    backend: &dyn LlmBackend,
    options: &EvalOptions,
) -> Result<CandidateEvaluation, EvalError> {
    let record = run.candidate(candidate_id)?;
    let harness_dir = run.harness_dir(candidate_id);
    let started = Instant::now();
    let mut results = Vec::with_capacity(datasets.len());
    for dataset in datasets {
        let stderr = match options.recording {
            Recording::Store => {
                let dir = run.trace_dir(candidate_id, &dataset.dataset_id);
                fs::create_dir_all(&dir).map_err(|source| StoreError::Io { path: dir.clone(), source })?;
                StderrSink::File(dir.join("stderr.log"))
            }
            Recording::Discard => StderrSink::Discard,
        };
        let failed = |source: HarnessError| EvalError::Harness {
            candidate_id: candidate_id.into(),
            dataset_id: dataset.dataset_id.clone(),
            source,
        };
        let launch_options = LaunchOptions { op_timeout: options.op_timeout, deadline: None, stderr };
        let program = instantiate(&record.launch, &harness_dir, launch_options).map_err(failed)?;
        let mut handle = HarnessHandle::new(candidate_id, program, evaluator.estimator());
        let memory;
        let stored;
        let trace: &dyn TraceLog = match options.recording {
            Recording::Store => {
                stored = CandidateTrace { run, candidate_id: candidate_id.into() };
                &stored
            }
            Recording::Discard => {
                memory = MemoryTrace::default();
                &memory
            }
        };
        let result = evaluator.evaluate(&mut handle, dataset, backend, trace).map_err(failed)?;
        let _ = handle.shutdown();
        results.push(result);
    }
    let per_dataset: BTreeMap<String, DatasetScore> =
        results.iter().map(|r| (r.dataset_id.clone(), r.score.clone())).collect();
    let report = ScoreReport::from_datasets(per_dataset, started.elapsed().as_secs_f64());
    Ok(CandidateEvaluation { report, results })
}

/// Traces and outcomes left by an evaluation that never finished are moved
/// to `<name>.interrupted-<n>` so the new attempt starts clean.
fn set_aside_interrupted(run: &Run, candidate_id: &str) -> Result<(), StoreError> {
    if run.candidate(candidate_id)?.status != Status::Pending {
        return Ok(());
    }
    let dir = run.candidate_dir(candidate_id);
    for name in ["traces", "outcomes"] {
        let from = dir.join(name);
        if !from.exists() {
            continue;
        }
        let to = (1..)
            .map(|n| dir.join(format!("{name}.interrupted-{n}")))
            .find(|p| !p.exists())
            .expect("unbounded suffixes");
        fs::rename(&from, &to).map_err(|source| StoreError::Io { path: from, source })?;
    }
    Ok(())
}

/// Evaluate and persist: scores plus per-example outcomes on success, status
/// `crashed` with the reason on harness failure (traces so far are kept).
pub fn evaluate_and_record(
    evaluator: &Evaluator,
    run: &Run,
    candidate_id: &str,
    datasets: &[Dataset],
    backend: &dyn LlmBackend,
    options: &EvalOptions,
) -> Result<CandidateEvaluation, EvalError> {
    let options = EvalOptions { recording: Recording::Store, ..options.clone() };
    set_aside_interrupted(run, candidate_id)?;
    match evaluate_candidate(evaluator, run, candidate_id, datasets, backend, &options) {
        Ok(evaluation) => {
            let dir = run.candidate_dir(candidate_id).join("outcomes");
            fs::create_dir_all(&dir).map_err(|source| StoreError::Io { path: dir.clone(), source })?;
            for result in &evaluation.results {
                let path = dir.join(format!("{}.jsonl", sanitize(&result.dataset_id)));
                let body: String = result
                    .per_example
                    .iter()
                    .map(|o| serde_json::to_string(o).expect("outcomes serialize") + "\n")
                    .collect();
                fs::write(&path, body).map_err(|source| StoreError::Io { path, source })?;
            }
            run.write_scores(candidate_id, &evaluation.report)?;
            Ok(evaluation)
        }
        Err(EvalError::Harness { candidate_id, dataset_id, source }) => {
            tracing::warn!(%candidate_id, %dataset_id, error = %source, "candidate crashed");
            run.set_status(&candidate_id, Status::Crashed, Some(format!("{dataset_id}: {source}")))?;
            Err(EvalError::Harness { candidate_id, dataset_id, source })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockBackend, MockRule};
    use crate::reference::{build_native, FewShot};
    use crate::store::NullTrace;

    fn classification(test: &[(&str, &str, &str)]) -> Dataset {
        let train = vec![Example::new("t1", "alpha", Some("A")), Example::new("t2", "beta", Some("B"))];
        let test = test.iter().map(|(id, text, label)| Example::new(id, text, Some(label))).collect();
        Dataset::new("d", TaskKind::OnlineClassification, train, test, None).unwrap().with_instruction("Classify.")
    }

    fn eval(native: &str, dataset: &Dataset, backend: &MockBackend) -> EvaluationResult {
        let mut handle = HarnessHandle::new("c", build_native(native).unwrap(), TokenEstimator::default());
        Evaluator::new(TokenEstimator::default()).evaluate(&mut handle, dataset, backend, &NullTrace).unwrap()
    }

    #[test]
    fn answer_normalization() {
        assert_eq!(normalize_answer("\\boxed{42}"), "42");
        assert_eq!(normalize_answer("  $x+1$ "), "x+1");
        assert_eq!(normalize_answer("42"), "42");
        assert_eq!(normalize_answer("so \\boxed{\\frac{1}{2}} done"), "\\frac{1}{2}");
        assert_eq!(normalize_answer("\\boxed{\\boxed{ X  Y }}"), "x y");
        assert_eq!(normalize_answer("first \\boxed{1} then \\boxed{2}"), "2");
        assert_eq!(normalize_answer("\\boxed{7"), "7");
        for s in ["\\boxed{42}", "  $x+1$ ", "A  b\tC"] {
            assert_eq!(normalize_answer(&normalize_answer(s)), normalize_answer(s));
        }
    }

    #[test]
    fn label_normalization() {
        assert_eq!(normalize_label("  Positive\n"), "positive");
    }

    #[test]
    fn majority_mock_scores_seven_of_ten() {
        let items: Vec<(String, String, &str)> =
            (0..10).map(|i| (format!("q{i}"), format!("item {i}"), if i < 7 { "A" } else { "B" })).collect();
        let refs: Vec<(&str, &str, &str)> = items.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), *c)).collect();
        let result = eval("zero_shot", &classification(&refs), &MockBackend::constant("A"));
        assert_eq!(result.score.accuracy, 0.7);
        assert_eq!((result.score.n_correct, result.score.n_total), (7, 10));
    }

    #[test]
    fn zero_shot_has_zero_additional_context() {
        let ds = classification(&[("q1", "gamma", "A"), ("q2", "a much longer delta input", "B")]);
        let result = eval("zero_shot", &ds, &MockBackend::constant("B"));
        assert_eq!(result.score.mean_additional_context_tokens, 0.0);
        assert_eq!(result.score.mean_additional_context_chars, 0.0);
        let few = eval("few_shot:all", &ds, &MockBackend::constant("B"));
        assert!(few.score.mean_additional_context_tokens > 0.0);
        assert!(few.per_example.iter().all(|o| o.additional_context_tokens > 0));
    }

    #[test]
    fn baseline_is_memoized_and_monotone() {
        let ds = classification(&[]);
        let ev = Evaluator::new(TokenEstimator::default());
        let short = Example::new("a", "abcd", None);
        let long = Example::new("b", "abcd efgh", None);
        assert_eq!(ev.baseline_prompt_tokens(&ds, &short), ev.baseline_prompt_tokens(&ds, &short));
        assert!(ev.baseline_prompt_tokens(&ds, &long) > ev.baseline_prompt_tokens(&ds, &short));
        let tiny = Dataset::new("t", TaskKind::OnlineClassification, vec![Example::new("x", "x", Some("A"))], vec![], None).unwrap();
        let q = Example::new("q", "x", None);
        assert_eq!(
            ev.baseline_prompt_tokens(&tiny, &q),
            TokenEstimator::default().count("Valid labels: A\n\nInput: x\nLabel:")
        );
    }

    #[test]
    fn qa_averages_over_samples() {
        let ds = Dataset::new("m", TaskKind::Qa, vec![], vec![Example::new("p", "2+2?", Some("4"))], None)
            .unwrap()
            .with_samples(3);
        let mock = MockBackend::new(
            vec![MockRule::new("2+2", "\\boxed{4}").on_sample(0), MockRule::new("2+2", "\\boxed{4}").on_sample(1)],
            Some("\\boxed{5}".into()),
            TokenEstimator::default(),
        );
        let result = eval("math_retrieval:none", &ds, &mock);
        assert_eq!(result.score.n_total, 3);
        assert_eq!(result.score.n_correct, 2);
        assert_eq!(result.score.accuracy, 2.0 / 3.0);
        let samples: Vec<u32> = result.per_example.iter().map(|o| o.sample_index).collect();
        assert_eq!(samples, [0, 1, 2]);
        assert_eq!(eval("math_retrieval:none", &ds, &MockBackend::constant("\\boxed{4}")).score.accuracy, 1.0);
        assert_eq!(eval("math_retrieval:none", &ds, &MockBackend::constant("3")).score.accuracy, 0.0);
    }

    #[test]
    fn test_order_does_not_change_accuracy_for_static_harnesses() {
        let items = [("q1", "alpha one", "A"), ("q2", "beta two", "B"), ("q3", "alpha three", "A")];
        let mut reversed = items;
        reversed.reverse();
        let mock = MockBackend::new(vec![MockRule::new("Input: alpha", "A")], Some("B".into()), TokenEstimator::default());
        for native in ["zero_shot", "few_shot:1"] {
            let a = eval(native, &classification(&items), &mock);
            let b = eval(native, &classification(&reversed), &mock);
            assert_eq!(a.score, b.score, "{native}");
        }
    }

    #[test]
    fn evaluation_is_deterministic_on_the_mock() {
        let ds = classification(&[("q1", "alpha", "A"), ("q2", "beta", "B")]);
        let mock = MockBackend::constant("A");
        let mut h1 = HarnessHandle::new("c", Box::new(FewShot::zero_shot()), TokenEstimator::default());
        let mut h2 = HarnessHandle::new("c", Box::new(FewShot::zero_shot()), TokenEstimator::default());
        let ev = Evaluator::new(TokenEstimator::default());
        assert_eq!(
            ev.evaluate(&mut h1, &ds, &mock, &NullTrace).unwrap(),
            ev.evaluate(&mut h2, &ds, &mock, &NullTrace).unwrap()
        );
    }
}
