use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};

use mh_core::dataset::{Dataset, Split};
use mh_core::evaluator::{evaluate_and_record, evaluate_candidate, EvalOptions, Evaluator, Recording};
use mh_core::harness::{serve, validate_candidate, GateOutcome, SmokeTask};
use mh_core::llm::{build_backend, BackendConfig, BackendKind};
use mh_core::metrics::{rank, Direction, MetricVector, ObjectiveSpec};
use mh_core::reference::build_native;
use mh_core::search::{propose_from_queue, run_best_so_far, run_frontier, run_search, SearchConfig, SearchOptions};
use mh_core::store::{CandidateFilter, NewCandidate, Origin, Run, Status};
use mh_retrieval::{decontaminate, ingest_corpus, load_corpus, route_retrieve, write_corpus, CorpusIndexes, RoutePolicies};

use crate::{table, BackendArgs, BackendKindArg, Cli, Cmd, CorpusCmd, SplitArg, Usage};

fn need_run(run: &Option<PathBuf>) -> Result<&Path> {
    run.as_deref().ok_or_else(|| Usage("--run <dir> is required".into()).into())
}

fn open_run(run: &Option<PathBuf>) -> Result<Run> {
    Ok(Run::open(need_run(run)?)?)
}

/// The search config a run was created with.
fn run_config(run: &Run) -> Result<SearchConfig> {
    serde_json::from_value(run.manifest().search_config_snapshot.clone())
        .context("run has no usable config snapshot (create it with `init --config`)")
}

fn out(text: &str) -> Result<()> {
    let mut stdout = io::stdout().lock();
    stdout.write_all(text.as_bytes())?;
    stdout.flush()?;
    Ok(())
}

fn apply_backend(mut config: BackendConfig, args: &BackendArgs, default_source: Option<&str>) -> BackendConfig {
    if let Some(kind) = args.backend {
        config.kind = match kind {
            BackendKindArg::Mock => BackendKind::Mock,
            BackendKindArg::Replay => BackendKind::Replay,
            BackendKindArg::Http => BackendKind::Http,
        };
    }
    if let Some(source) = args.replay_source.clone().or_else(|| default_source.map(str::to_string)) {
        if config.replay_source.is_none() || args.replay_source.is_some() {
            config.replay_source = Some(source);
        }
    }
    config
}

fn smoke_task(datasets: &[Dataset]) -> Result<SmokeTask> {
    let first = datasets.first().ok_or_else(|| anyhow!("no datasets configured"))?;
    let pool: Vec<_> = first.train.iter().chain(&first.test).cloned().collect();
    SmokeTask::from_examples(first.task_config(), &pool).ok_or_else(|| anyhow!("dataset {} is empty", first.dataset_id))
}

pub fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Init { config } => {
            let root = need_run(&cli.run)?;
            let config = SearchConfig::load(&config)?;
            if root.join("run.json").exists() {
                bail!("{} already holds a run", root.display());
            }
            let run = config.open_run(root)?;
            out(&format!("{}\n", run.root().display()))?;
        }
        Cmd::Seed { seeds } => {
            let run = open_run(&cli.run)?;
            for seed in seeds {
                let (name, dir) = match seed.split_once('=') {
                    Some((name, dir)) => (name.to_string(), PathBuf::from(dir)),
                    None => {
                        let dir = PathBuf::from(&seed);
                        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or(seed.clone());
                        (name, dir)
                    }
                };
                let record = run.create_candidate(NewCandidate::from_dir(Origin::Seed, &name, &dir, &[])?)?;
                out(&format!("{}\n", record.candidate_id))?;
            }
        }
        Cmd::Validate { candidate, timeout } => {
            let run = open_run(&cli.run)?;
            let id = run.resolve(&candidate)?;
            let config = run_config(&run)?;
            let smoke = smoke_task(&config.search_datasets()?)?;
            let budget = Duration::from_secs_f64(timeout.unwrap_or(config.validation.timeout_s));
            match validate_candidate(&run, &id, &smoke, budget)? {
                GateOutcome::Pass => out(&format!("{id},pass\n"))?,
                GateOutcome::Fail(failure) => {
                    out(&format!("{id},fail,{}\n", failure.code()))?;
                    eprintln!("{id}: {failure}");
                    return Ok(ExitCode::from(1));
                }
            }
        }
        Cmd::Eval { candidate, split, dataset, backend } => {
            let run = open_run(&cli.run)?;
            let id = run.resolve(&candidate)?;
            let config = run_config(&run)?;
            let split = match split {
                SplitArg::Search => Split::Search,
                SplitArg::Test => Split::Test,
            };
            for wanted in &dataset {
                if !config.datasets.iter().any(|d| &d.id == wanted) {
                    bail!("unknown dataset {wanted}");
                }
            }
            let datasets: Vec<Dataset> = config
                .datasets
                .iter()
                .filter(|d| dataset.is_empty() || dataset.contains(&d.id))
                .map(|d| d.load(split))
                .collect::<Result<_, _>>()?;
            let backend_config = apply_backend(config.backend.clone(), &backend, Some(&id));
            let llm = build_backend(&backend_config, config.token_estimator, Some(&run))?;
            let evaluator = Evaluator::new(config.token_estimator);
            let options = EvalOptions {
                op_timeout: Duration::from_secs_f64(config.evaluation.op_timeout_s),
                recording: Recording::Discard,
            };
            // Only a full search-split evaluation of a pending candidate on
            // a live backend is recorded.
            let record = run.candidate(&id)?;
            let records = split == Split::Search
                && dataset.is_empty()
                && record.status == Status::Pending
                && backend_config.kind != BackendKind::Replay;
            let evaluation = if records {
                evaluate_and_record(&evaluator, &run, &id, &datasets, llm.as_ref(), &options)?
            } else {
                evaluate_candidate(&evaluator, &run, &id, &datasets, llm.as_ref(), &options)?
            };
            out(&(serde_json::to_string_pretty(&evaluation.report)? + "\n"))?;
        }
        Cmd::Search { config, stop_after, backend } => {
            let root = need_run(&cli.run)?;
            let mut config = SearchConfig::load(&config)?;
            config.backend = apply_backend(config.backend, &backend, None);
            let run = config.open_run(root)?;
            let outcome = run_search(&config, &run, &SearchOptions { stop_after_iteration: stop_after })?;
            out(&table::frontier(&outcome.frontier, &run.manifest().objectives)?)?;
        }
        Cmd::Frontier => {
            let run = open_run(&cli.run)?;
            out(&table::frontier(&run_frontier(&run)?, &run.manifest().objectives)?)?;
        }
        Cmd::Top { k, by } => {
            let run = open_run(&cli.run)?;
            let objectives = &run.manifest().objectives;
            let evaluated = run.evaluated()?;
            if !evaluated.iter().any(|(_, r)| r.aggregate.get(&by).is_some()) && !evaluated.is_empty() {
                bail!("unknown metric {by}");
            }
            let primary = objectives
                .iter()
                .find(|o| o.name == by)
                .cloned()
                .unwrap_or(ObjectiveSpec { name: by.clone(), direction: Direction::Maximize });
            let tie = objectives.iter().find(|o| o.name != by);
            let points: Vec<(String, MetricVector)> =
                evaluated.iter().map(|(rec, r)| (rec.candidate_id.clone(), r.aggregate.clone())).collect();
            let by_id: BTreeMap<&str, _> = evaluated.iter().map(|(rec, r)| (rec.candidate_id.as_str(), (rec, r))).collect();
            let best: Vec<_> = rank(&points, &primary, tie)
                .into_iter()
                .take(k)
                .map(|id| {
                    let (rec, report) = by_id[id.as_str()];
                    (rec.clone(), report.clone())
                })
                .collect();
            out(&table::scored(&best)?)?;
        }
        Cmd::Diff { a, b } => {
            let run = open_run(&cli.run)?;
            let diff = run.diff_candidates(&run.resolve(&a)?, &run.resolve(&b)?)?;
            out(&diff.render())?;
        }
        Cmd::Report { out: dir } => {
            let run = open_run(&cli.run)?;
            let dir = dir.unwrap_or_else(|| run.root().join("report"));
            fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
            let frontier = table::frontier(&run_frontier(&run)?, &run.manifest().objectives)?;
            let (ids, series) = run_best_so_far(&run)?;
            fs::write(dir.join("frontier.csv"), frontier)?;
            fs::write(dir.join("best_so_far.csv"), table::best_so_far(&ids, &series)?)?;
            out(&format!("{}\n{}\n", dir.join("frontier.csv").display(), dir.join("best_so_far.csv").display()))?;
        }
        Cmd::List => {
            let run = open_run(&cli.run)?;
            out(&table::candidates(&run.list_candidates(&CandidateFilter::default())?)?)?;
        }
        Cmd::Corpus(cmd) => corpus(cmd)?,
        Cmd::HarnessServe { native } => {
            let mut program = build_native(&native).map_err(Usage)?;
            let stdin = io::stdin();
            let mut input = BufReader::new(stdin.lock());
            let mut output = io::stdout().lock();
            serve(program.as_mut(), &mut input, &mut output)?;
        }
        Cmd::ProposeFromQueue { queue, drop, iteration, k } => {
            for name in propose_from_queue(&queue, &drop, iteration, k)? {
                out(&format!("{name}\n"))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// `problem` (else `text`) of every JSONL row.
fn eval_problems(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut problems = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        let problem = row
            .get("problem")
            .or_else(|| row.get("text"))
            .and_then(|v| v.as_str())
            .ok_or_else(|| anyhow!("{}:{}: no problem or text field", path.display(), n + 1))?;
        problems.push(problem.to_string());
    }
    Ok(problems)
}

fn corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Ingest { out: path, max_solution_chars, files } => {
            let entries = ingest_corpus(&files, max_solution_chars)?;
            write_corpus(&path, &entries)?;
            out(&format!("{}\n", entries.len()))?;
        }
        CorpusCmd::Decontaminate { corpus, eval, out: path, prefix_len, threshold } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Usage(format!("threshold {threshold} is outside [0, 1]")).into());
            }
            let sets: Vec<Vec<String>> = eval.iter().map(|p| eval_problems(p)).collect::<Result<_>>()?;
            let (kept, log) = decontaminate(load_corpus(&corpus)?, &sets, prefix_len, threshold);
            write_corpus(&path, &kept)?;
            out(&(serde_json::to_string_pretty(&log)? + "\n"))?;
        }
        CorpusCmd::Query { corpus, problem } => {
            let indexes = CorpusIndexes::build(load_corpus(&corpus)?, RoutePolicies::default())?;
            let outcome = route_retrieve(&problem, &indexes)?;
            let body = serde_json::json!({
                "route": outcome.route.as_str(),
                "fetched": outcome.fetched,
                "deduped": outcome.deduped,
                "references": outcome.references,
                "entries": outcome.entries,
            });
            out(&(serde_json::to_string_pretty(&body)? + "\n"))?;
        }
    }
    Ok(())
}
