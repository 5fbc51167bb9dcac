//! Acceptance suite. Every criterion prints one PASS or FAIL line; the
//! process exits nonzero when any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use mh_core::dataset::{Dataset, Split};
use mh_core::evaluator::{evaluate_and_record, evaluate_candidate, EvalOptions, Evaluator, Recording};
use mh_core::harness::{
    validate_candidate, validate_dir, Example, GateFailure, GateOutcome, HarnessHandle, SmokeTask, TaskKind,
};
use mh_core::llm::{build_backend, MockBackend, MockRule, ReplayBackend, TokenEstimator};
use mh_core::metrics::{dominates, pareto_frontier, Direction, MetricVector, ObjectiveSpec};
use mh_core::reference::{build_native, label_primed_plan, DraftVerification, LabelPrimed, Memory, SectionKind};
use mh_core::search::{run_frontier, run_search, ProposerConfig, SearchConfig, SearchOptions, SeedSpec};
use mh_core::store::{MemoryTrace, NewCandidate, Origin, Run, ScoreReport, Status, ACCURACY, CTX_TOKENS};
use mh_retrieval::{
    adaptive_k, decontaminate, jaccard, load_corpus, math_tokenize, route_retrieve, Bm25Index, Bm25Params,
    CorpusEntry, CorpusIndexes, Route, RoutePolicies,
};

const BIN: &str = env!("CARGO_BIN_EXE_metaharness");

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root")
}

fn fixtures() -> PathBuf {
    root().join("fixtures")
}

fn corpus_path() -> PathBuf {
    root().join("crates/retrieval/data/fixture_corpus.jsonl")
}

// ---------------------------------------------------------------------------
// Pareto

fn brute_front(points: &[Vec<f64>], maximize: &[bool]) -> BTreeSet<usize> {
    let better_eq = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).zip(maximize).all(|((x, y), &up)| if up { x >= y } else { x <= y })
    };
    (0..points.len())
        .filter(|&i| {
            !(0..points.len()).any(|j| {
                j != i && better_eq(&points[j], &points[i]) && points[j] != points[i]
            })
        })
        .collect()
}

fn pareto_oracle() -> Result<String> {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut timed = Duration::ZERO;
    let mut total_points = 0;
    for instance in 0..200 {
        let n = rng.random_range(1..=1000);
        let m = rng.random_range(2..=4);
        let maximize: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        // a third of the instances draw from a small grid so ties are common
        let grid = instance % 3 == 0;
        let raw: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| if grid { rng.random_range(0..6) as f64 } else { rng.random_range(-1e3..1e3) })
                    .collect()
            })
            .collect();
        let objectives: Vec<ObjectiveSpec> = maximize
            .iter()
            .enumerate()
            .map(|(k, &up)| ObjectiveSpec {
                name: format!("m{k}"),
                direction: if up { Direction::Maximize } else { Direction::Minimize },
            })
            .collect();
        let points: Vec<(usize, MetricVector)> = raw
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let vector = MetricVector::new(row.iter().enumerate().map(|(k, &v)| (format!("m{k}"), v)))?;
                Ok((i, vector))
            })
            .collect::<Result<_>>()?;
        let started = Instant::now();
        let front = pareto_frontier(&points, &objectives)?;
        timed += started.elapsed();
        let got: BTreeSet<usize> = front.iter().map(|(i, _)| *i).collect();
        ensure!(got.len() == front.len(), "instance {instance}: duplicate ids in frontier");
        let want = brute_front(&raw, &maximize);
        ensure!(got == want, "instance {instance}: {} vs brute force {}", got.len(), want.len());
        total_points += n;
    }
    ensure!(timed < Duration::from_secs(5), "pareto_frontier took {timed:?}");
    Ok(format!("200 instances, {total_points} points, {:.3}s", timed.as_secs_f64()))
}

fn table_frontier() -> Result<String> {
    let objectives = vec![ObjectiveSpec::maximize("accuracy"), ObjectiveSpec::minimize("ctx")];
    let row = |name: &str, acc: f64, ctx: f64| -> Result<(String, MetricVector)> {
        Ok((name.to_string(), MetricVector::new([("accuracy", acc), ("ctx", ctx)])?))
    };
    let rows = vec![
        row("Zero-Shot", 27.4, 0.0)?,
        row("Few-Shot(8)", 34.3, 2.0)?,
        row("Few-Shot(32)", 35.4, 7.9)?,
        row("Few-Shot(all)", 40.8, 12.3)?,
        row("MCE", 40.0, 28.5)?,
        row("ACE", 40.9, 50.8)?,
        row("Searched", 48.6, 11.4)?,
    ];
    let front: BTreeSet<String> = pareto_frontier(&rows, &objectives)?.into_iter().map(|(id, _)| id).collect();
    let want: BTreeSet<String> =
        ["Zero-Shot", "Few-Shot(8)", "Few-Shot(32)", "Searched"].map(String::from).into();
    ensure!(front == want, "frontier {front:?}");
    let draft = row("Draft Verification", 40.1, 5.4)?.1;
    let primed = row("Label-Primed", 48.6, 45.5)?.1;
    ensure!(!dominates(&draft, &primed, &objectives)?, "draft verification dominates label-primed");
    ensure!(!dominates(&primed, &draft, &objectives)?, "label-primed dominates draft verification");
    Ok("4-member frontier, endpoints non-dominated".into())
}

// ---------------------------------------------------------------------------
// Search loop

fn harness_toml(native: &str) -> String {
    format!("native = {native:?}\n")
}

fn served_toml(native: &str) -> String {
    format!("entry = [{BIN:?}, \"harness-serve\", {native:?}]\n")
}

/// Forty proposals cycling through built-in variants, every eighth served
/// over the subprocess protocol.
fn write_queue(dir: &Path) -> Result<()> {
    for i in 0..40u32 {
        let round = i / 8;
        let toml = match i % 8 {
            0 => harness_toml(&format!("few_shot:{}", 1 + round)),
            1 => harness_toml(&format!("label_primed:{}", round % 4)),
            2 => harness_toml("draft_verification"),
            3 => harness_toml("few_shot:all"),
            4 => served_toml(&format!("few_shot:{}", 2 + round)),
            5 => harness_toml("zero_shot"),
            6 => harness_toml(&format!("few_shot:{}", 8 + round)),
            _ => harness_toml("label_primed"),
        };
        let entry = dir.join(format!("q{i:02}"));
        fs::create_dir_all(&entry)?;
        fs::write(entry.join("harness.toml"), toml)?;
        fs::write(entry.join("parents.txt"), format!("c{:04}\n", 1 + i % 4))?;
        fs::write(entry.join("note.txt"), format!("queued variant {i}\n"))?;
    }
    Ok(())
}

fn search_config(queue: &Path) -> Result<SearchConfig> {
    let mut config = SearchConfig::load(&fixtures().join("topics_search.toml"))?;
    config.run_id = "acceptance".into();
    config.iterations = 20;
    config.candidates_per_iteration = 2;
    config.seeds = ["zero_shot", "few_shot_8", "draft_verification", "label_primed"]
        .iter()
        .map(|name| SeedSpec { name: name.to_string(), dir: root().join("seeds").join(name) })
        .collect();
    config.proposer = Some(ProposerConfig {
        command: vec![BIN.into(), "propose-from-queue".into(), "--queue".into(), queue.display().to_string()],
        timeout_s: 60,
        skill_path: None,
    });
    Ok(config)
}

/// (candidate id, accuracy bits, ctx bits) of each frontier member.
fn frontier_key(run: &Run) -> Result<Vec<(String, u64, u64)>> {
    run_frontier(run)?
        .into_iter()
        .map(|e| {
            let acc = e.metrics.get(ACCURACY).ok_or_else(|| anyhow!("no accuracy"))?;
            let ctx = e.metrics.get(CTX_TOKENS).ok_or_else(|| anyhow!("no ctx"))?;
            Ok((e.record.candidate_id, acc.to_bits(), ctx.to_bits()))
        })
        .collect()
}

struct Shared {
    _dir: tempfile::TempDir,
    queue: PathBuf,
    scratch: PathBuf,
    reference: Option<Vec<(String, u64, u64)>>,
}

impl Shared {
    fn new() -> Result<Self> {
        let dir = tempfile::tempdir()?;
        let queue = dir.path().join("queue");
        write_queue(&queue)?;
        let scratch = dir.path().to_path_buf();
        Ok(Self { _dir: dir, queue, scratch, reference: None })
    }
}

fn search_budget(shared: &mut Shared) -> Result<String> {
    let config = search_config(&shared.queue)?;
    let n_examples: usize = config
        .datasets
        .iter()
        .map(|d| d.load(Split::Search).map(|ds| ds.train.len() + ds.test.len()))
        .sum::<Result<usize, _>>()?;
    ensure!(n_examples == 30, "fixture has {n_examples} examples");
    let run = config.open_run(&shared.scratch.join("budget"))?;
    let started = Instant::now();
    let outcome = run_search(&config, &run, &SearchOptions::default())?;
    let elapsed = started.elapsed();
    ensure!(outcome.iterations_completed == 20, "{} iterations", outcome.iterations_completed);
    ensure!(outcome.evaluated.len() == 44, "{} candidates evaluated", outcome.evaluated.len());
    ensure!(elapsed < Duration::from_secs(60), "search took {elapsed:?}");
    ensure!(outcome.best_so_far.len() == 44, "series length {}", outcome.best_so_far.len());
    ensure!(outcome.best_so_far.windows(2).all(|w| w[0] <= w[1]), "best-so-far decreases");
    shared.reference = Some(frontier_key(&run)?);
    Ok(format!(
        "44 evaluated in {:.1}s, best accuracy {:.3}",
        elapsed.as_secs_f64(),
        outcome.best_so_far.last().copied().unwrap_or_default()
    ))
}

fn kill_and_resume(shared: &Shared) -> Result<String> {
    let reference = shared.reference.clone().ok_or_else(|| anyhow!("no uninterrupted reference run"))?;
    let config = search_config(&shared.queue)?;

    // cooperative stop after iteration 10, then resume
    let run = config.open_run(&shared.scratch.join("stopped"))?;
    let first = run_search(&config, &run, &SearchOptions { stop_after_iteration: Some(10) })?;
    ensure!(first.iterations_completed == 10, "stopped after {}", first.iterations_completed);
    let run = config.open_run(&shared.scratch.join("stopped"))?;
    run_search(&config, &run, &SearchOptions::default())?;
    ensure!(frontier_key(&run)? == reference, "frontier after stop/resume differs");

    // hard kill of the CLI once iteration 10 is on disk
    let config_path = shared.scratch.join("kill_config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config)?)?;
    let run_dir = shared.scratch.join("killed");
    let search = |dir: &Path| {
        Command::new(BIN)
            .arg("--run")
            .arg(dir)
            .arg("search")
            .arg("--config")
            .arg(&config_path)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
    };
    let mut child = search(&run_dir)?;
    let marker = run_dir.join("proposals/iter_10/iteration.json");
    let deadline = Instant::now() + Duration::from_secs(60);
    while !marker.exists() {
        if child.try_wait()?.is_some() {
            bail!("search exited before iteration 10 was recorded");
        }
        ensure!(Instant::now() < deadline, "iteration 10 never completed");
        std::thread::sleep(Duration::from_millis(2));
    }
    child.kill()?;
    child.wait()?;
    let done = (1..=20).filter(|t| run_dir.join(format!("proposals/iter_{t}/iteration.json")).exists()).count();
    ensure!(done < 20, "run finished before the kill landed");
    let status = search(&run_dir)?.wait()?;
    ensure!(status.success(), "resumed search failed: {status}");
    let run = Run::open(&run_dir)?;
    ensure!(run.evaluated()?.len() == 44, "{} evaluated after resume", run.evaluated()?.len());
    ensure!(frontier_key(&run)? == reference, "frontier after kill/resume differs");
    Ok(format!("stop at 10 and SIGKILL after {done} iterations both match ({} members)", reference.len()))
}

// ---------------------------------------------------------------------------
// Validation gate

const PROTOCOL_LOOP: &str = r#"while IFS= read -r line; do
  case "$line" in
    *'"type":"init"'*) echo '{"type":"ready"}' ;;
    *'"type":"learn"'*) echo '{"type":"ack"}' ;;
    *'"type":"predict"'*) PREDICT ;;
    *'"type":"shutdown"'*) exit 0 ;;
  esac
done
"#;

fn sh_harness(dir: &Path, script: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("harness.toml"), "entry = [\"sh\", \"harness.sh\"]\n")?;
    fs::write(dir.join("harness.sh"), script)?;
    Ok(())
}

fn validation_gate(shared: &Shared) -> Result<String> {
    let config = SearchConfig::load(&fixtures().join("topics_search.toml"))?;
    let run = config.open_run(&shared.scratch.join("gate"))?;
    let datasets = config.search_datasets()?;
    let first = &datasets[0];
    let pool: Vec<Example> = first.train.iter().chain(&first.test).cloned().collect();
    let smoke = SmokeTask::from_examples(first.task_config(), &pool).ok_or_else(|| anyhow!("empty smoke pool"))?;
    let budget = Duration::from_secs(5);
    let src = shared.scratch.join("gate_src");

    let bad_label = PROTOCOL_LOOP.replace(
        "PREDICT",
        r#"qid=$(printf '%s\n' "$line" | sed -n 's/.*"query_id":"\([^"]*\)".*/\1/p'); printf '{"type":"prediction","query_id":"%s","label":"ZZZ"}\n' "$qid""#,
    );
    let broken: Vec<(&str, String, &str)> = vec![
        ("no_ready", "read line\nexit 0\n".into(), "no_ready"),
        ("timeout", "exec sleep 60\n".into(), "timeout"),
        ("bad_label", bad_label, "invalid_label"),
        ("malformed", "read line\necho 'this is not json'\nsleep 5\n".into(), "malformed_message"),
        ("crash", PROTOCOL_LOOP.replace("PREDICT", "exit 3"), "crash"),
    ];
    let mut lines = Vec::new();
    for (name, script, code) in &broken {
        let dir = src.join(name);
        sh_harness(&dir, script)?;
        let record = run.create_candidate(NewCandidate::from_dir(Origin::Seed, name, &dir, &[])?)?;
        let started = Instant::now();
        let outcome = validate_candidate(&run, &record.candidate_id, &smoke, budget)?;
        let took = started.elapsed();
        match &outcome {
            GateOutcome::Fail(f) if f.code() == *code => {}
            other => bail!("{name}: expected {code}, got {other:?}"),
        }
        ensure!(took < Duration::from_secs(30), "{name} took {took:?}");
        let stored = run.candidate(&record.candidate_id)?;
        ensure!(stored.status == Status::ValidationFailed, "{name} status {}", stored.status);
        lines.push(format!("{name}={code}"));
    }

    let empty = src.join("empty");
    fs::create_dir_all(&empty)?;
    let started = Instant::now();
    let outcome = validate_dir(&empty, &smoke, budget);
    ensure!(outcome == GateOutcome::Fail(GateFailure::EmptySources), "empty sources: {outcome:?}");
    ensure!(started.elapsed() < Duration::from_secs(30));
    lines.push("empty=empty_sources".into());

    for (name, toml) in [("native_ok", harness_toml("few_shot:8")), ("served_ok", served_toml("label_primed"))] {
        let dir = src.join(name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("harness.toml"), toml)?;
        let record = run.create_candidate(NewCandidate::from_dir(Origin::Seed, name, &dir, &[])?)?;
        let started = Instant::now();
        let outcome = validate_candidate(&run, &record.candidate_id, &smoke, budget)?;
        ensure!(outcome.passed(), "{name}: {outcome:?}");
        ensure!(started.elapsed() < Duration::from_secs(30), "{name} took {:?}", started.elapsed());
        lines.push(format!("{name}=pass"));
    }
    Ok(lines.join(" "))
}

// ---------------------------------------------------------------------------
// Replay

fn same_report(a: &ScoreReport, b: &ScoreReport) -> bool {
    let bits = |r: &ScoreReport| -> Vec<u64> {
        r.per_dataset
            .values()
            .flat_map(|d| {
                [d.accuracy.to_bits(), d.n_correct, d.n_total, d.mean_additional_context_tokens.to_bits(), d.mean_additional_context_chars.to_bits()]
            })
            .chain(r.aggregate.iter().map(|(_, v)| v.to_bits()))
            .collect()
    };
    a.per_dataset.keys().eq(b.per_dataset.keys())
        && a.aggregate.iter().map(|(k, _)| k).eq(b.aggregate.iter().map(|(k, _)| k))
        && bits(a) == bits(b)
}

fn replay_run(shared: &Shared, config_file: &str, harnesses: &[(&str, String)]) -> Result<usize> {
    let config = SearchConfig::load(&fixtures().join(config_file))?;
    let run = config.open_run(&shared.scratch.join(format!("replay_{}", config.run_id)))?;
    let datasets = config.search_datasets()?;
    let evaluator = Evaluator::new(config.token_estimator);
    let options = EvalOptions { op_timeout: Duration::from_secs(60), recording: Recording::Store };
    let live = build_backend(&config.backend, config.token_estimator, Some(&run))?;
    for (name, toml) in harnesses {
        let dir = shared.scratch.join("replay_src").join(name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("harness.toml"), toml)?;
        let id = run.create_candidate(NewCandidate::from_dir(Origin::Seed, name, &dir, &[])?)?.candidate_id;
        let recorded = evaluate_and_record(&evaluator, &run, &id, &datasets, live.as_ref(), &options)?.report;
        let stored = run.scores(&id)?.ok_or_else(|| anyhow!("{name}: no stored scores"))?;
        let replay = ReplayBackend::from_run(&run, &id)?;
        let discard = EvalOptions { recording: Recording::Discard, ..options.clone() };
        let replayed = evaluate_candidate(&evaluator, &run, &id, &datasets, &replay, &discard)?.report;
        ensure!(same_report(&recorded, &replayed), "{name}: replay differs\n{recorded:?}\n{replayed:?}");
        ensure!(same_report(&stored, &replayed), "{name}: replay differs from stored scores\n{stored:?}\n{replayed:?}");
    }
    Ok(harnesses.len())
}

fn replay_determinism(shared: &Shared) -> Result<String> {
    let classification: Vec<(&str, String)> = vec![
        ("zero_shot", harness_toml("zero_shot")),
        ("few_shot_8", harness_toml("few_shot:8")),
        ("draft_verification", harness_toml("draft_verification")),
        ("label_primed", harness_toml("label_primed")),
        ("served_few_shot", served_toml("few_shot:4")),
    ];
    let qa: Vec<(&str, String)> = vec![
        ("math_baseline", harness_toml("math_retrieval:none")),
        ("math_retrieval", harness_toml("math_retrieval")),
    ];
    let n = replay_run(shared, "topics_search.toml", &classification)? + replay_run(shared, "arith_eval.toml", &qa)?;
    Ok(format!("{n} candidates reproduced bit-identically"))
}

// ---------------------------------------------------------------------------
// Retrieval

fn bm25_exactness() -> Result<String> {
    let index = Bm25Index::build(
        [("d1", "prime numbers"), ("d2", "prime factorization theorem"), ("d3", "triangle angle")],
        Bm25Params::default(),
    )?;
    // frozen from an independent evaluation of the Okapi formula, k1=1.2 b=0.75
    let expected = [0.4991762683023676, 0.42081720292932145, 0.0];
    let scores = index.scores("prime")?;
    ensure!(scores.len() == 3);
    for (got, want) in scores.iter().zip(expected) {
        ensure!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    let tokens = math_tokenize(r"Let \frac{a}{b} + x^{2} = 1");
    ensure!(tokens.iter().any(|t| t == r"\frac"), "tokens {tokens:?}");
    ensure!(tokens.iter().any(|t| t == "^{2}"), "tokens {tokens:?}");
    Ok(format!("scores {scores:?}"))
}

const WORDS: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu", "apple", "birch", "cedar", "dune", "ember", "fjord", "grove", "heath", "inlet",
    "jade", "knoll", "larch", "marsh", "nook", "oak", "pine", "quartz", "ridge", "slate", "thorn", "umber",
    "vale", "willow", "yew", "zinc", "amber", "basalt", "cobalt", "dolomite", "flint", "garnet", "hematite",
    "jasper", "kyanite", "lapis", "mica", "nickel", "onyx", "pyrite", "quartzite", "ruby", "shale", "topaz",
    "ulexite", "verdite", "wolframite", "zircon",
];

fn sentence(rng: &mut StdRng, n: usize) -> String {
    let mut picked: Vec<&str> = Vec::new();
    while picked.len() < n {
        let w = WORDS[rng.random_range(0..WORDS.len())];
        if !picked.contains(&w) {
            picked.push(w);
        }
    }
    picked.join(" ")
}

fn decontamination() -> Result<String> {
    let mut rng = StdRng::seed_from_u64(7);
    let eval: Vec<String> = (0..10).map(|i| format!("problem {i} {}", sentence(&mut rng, 20))).collect();
    let mut corpus = Vec::new();
    let mut planted = BTreeSet::new();
    for (i, problem) in eval.iter().take(5).enumerate() {
        // same first 64 characters, different ending
        let id = format!("prefix-{i}");
        let head: String = problem.chars().take(70).collect();
        corpus.push(CorpusEntry::new(&id, format!("{}  Then ADD {}", head.to_uppercase(), sentence(&mut rng, 6)), "s", "fixture"));
        planted.insert(id);
    }
    for (i, problem) in eval.iter().skip(5).enumerate() {
        // swap the first two words and replace the last: 20 of 22 tokens shared
        let mut words: Vec<&str> = problem.split(' ').collect();
        words.swap(0, 1);
        let last = words.len() - 1;
        words[last] = "replacement";
        let paraphrase = words.join(" ");
        let similarity = jaccard(problem, &paraphrase);
        ensure!((0.8..1.0).contains(&similarity), "paraphrase {i} has jaccard {similarity}");
        let id = format!("para-{i}");
        corpus.push(CorpusEntry::new(&id, &paraphrase, "s", "fixture"));
        planted.insert(id);
    }
    while corpus.len() < 100 {
        let id = format!("clean-{}", corpus.len());
        corpus.push(CorpusEntry::new(&id, sentence(&mut rng, 15), "s", "fixture"));
    }
    let (kept, log) = decontaminate(corpus, &[eval], 64, 0.8);
    let removed: BTreeSet<String> = log.removals.iter().map(|r| r.entry_id.clone()).collect();
    ensure!(removed == planted, "removed {removed:?}");
    ensure!(log.removals.len() == 10 && kept.len() == 90, "{} removed, {} kept", log.removals.len(), kept.len());
    Ok("exactly the 10 planted entries removed".into())
}

fn route_pipelines() -> Result<String> {
    let corpus = load_corpus(&corpus_path())?;
    ensure!(corpus.len() == 50, "fixture corpus has {} entries", corpus.len());
    let idx = CorpusIndexes::build(corpus, RoutePolicies::default())?;

    let problem = "In how many ways can we choose a subset of 9 balls so that no two chosen balls are adjacent?";
    let out = route_retrieve(problem, &idx)?;
    ensure!(out.route == Route::Combinatorics, "routed {:?}", out.route);
    let top20: Vec<String> = idx.main_index().search(problem, 20)?.into_iter().map(|h| h.entry_id).collect();
    ensure!(!out.entries.is_empty() && out.entries.len() <= 3, "{} entries", out.entries.len());
    ensure!(out.entries.iter().all(|e| top20.contains(&e.entry_id)), "entry outside the BM25 top-20");
    for (i, a) in out.entries.iter().enumerate() {
        for b in &out.entries[i + 1..] {
            ensure!(jaccard(&a.problem, &b.problem) < 0.8, "{} ~ {}", a.entry_id, b.entry_id);
        }
    }

    let out = route_retrieve("In triangle ABC, the incircle touches AB at F. Find angle AFC.", &idx)?;
    ensure!(out.route == Route::Geometry, "routed {:?}", out.route);
    ensure!(out.entries.len() == 3, "geometry returned {}", out.entries.len());
    ensure!(out.entries[0].difficulty.is_some_and(|d| d > 6.0), "first entry is not hard");
    ensure!(idx.is_hard_reference(&out.entries[0].entry_id));

    let out = route_retrieve("Find all primes p such that p^{2} + 8 is prime.", &idx)?;
    ensure!(out.route == Route::NumberTheory, "routed {:?}", out.route);
    ensure!(out.fetched.len() == 12, "number theory fetched {}", out.fetched.len());

    let mut defaults = Vec::new();
    for problem in ["Compute the limit of (1 + 1/n)^{n} as n tends to infinity.", "Evaluate the sum of the series 1/k^{2}."] {
        let out = route_retrieve(problem, &idx)?;
        ensure!(out.route == Route::Default, "routed {:?}", out.route);
        let s = &out.fetched_scores;
        let last = s[s.len().min(3) - 1];
        let mean = (0..3).map(|i| *s.get(i).unwrap_or(&last)).sum::<f64>() / 3.0;
        let k = if s[0] >= 1.5 * mean { 2 } else { 3 };
        ensure!(out.entries.len() == k.min(s.len()), "default kept {} (expected {k})", out.entries.len());
        ensure!(out.entries.len() == adaptive_k(s, 2, 3));
        defaults.push(k);
    }
    ensure!(defaults == [2, 3], "adaptive sizes {defaults:?}");

    for problem in [
        "Choose a subset of 12 tiles with a long case analysis of the arrangement.",
        "Two circles intersect at P and Q.",
        "Show that n^{5} - n is divisible by 30.",
        "Find the minimum of x + 1/x.",
    ] {
        let out = route_retrieve(problem, &idx)?;
        ensure!(out.entries.iter().all(|e| e.solution.chars().count() <= 3_000), "{problem}: long solution");
    }
    Ok("all four routes".into())
}

// ---------------------------------------------------------------------------
// Reference harnesses

fn topics() -> Result<Dataset> {
    let config = SearchConfig::load(&fixtures().join("topics_search.toml"))?;
    Ok(config.datasets[0].load(Split::Search)?)
}

fn call_contracts() -> Result<String> {
    let dataset = topics()?;
    let config = dataset.task_config();
    let trace = MemoryTrace::default();
    let mock = MockBackend::constant(&config.labels()[0]);
    let labels: BTreeMap<&str, &str> =
        dataset.train.iter().map(|e| (e.example_id.as_str(), e.label.as_deref().unwrap_or(""))).collect();

    let mut handle = HarnessHandle::new("dv", Box::new(DraftVerification::new()), TokenEstimator::default());
    handle.init(&config)?;
    for (n, example) in dataset.train.iter().enumerate() {
        if n == 4 || n == 5 || n == dataset.train.len() - 1 {
            mock.clear();
            let out = handle.predict(&dataset.test[0], 0, &mock, &trace)?;
            let want = if n < 5 { 1 } else { 2 };
            ensure!(out.calls == want, "memory {n}: {} calls", out.calls);
            if want == 2 {
                let aux = out.prediction.aux.clone().ok_or_else(|| anyhow!("no aux"))?;
                let draft = aux["draft"].as_str().unwrap_or_default();
                let ids = |key: &str| -> Vec<String> {
                    aux[key].as_array().into_iter().flatten().filter_map(|v| v.as_str().map(String::from)).collect()
                };
                let (confirmers, challengers) = (ids("confirmers"), ids("challengers"));
                ensure!(confirmers.len() <= 5 && challengers.len() <= 5, "{confirmers:?} {challengers:?}");
                ensure!(confirmers.iter().all(|id| labels[id.as_str()] == draft));
                ensure!(challengers.iter().all(|id| labels[id.as_str()] != draft));
                let verify = mock.calls().last().cloned().ok_or_else(|| anyhow!("no call"))?;
                let shown = verify.final_user_message().matches("Input: ").count();
                ensure!(shown == confirmers.len() + challengers.len() + 1, "{shown} inputs in the verify prompt");
            }
        }
        handle.learn(example, &trace)?;
    }

    let mut handle_primed = HarnessHandle::new("lp", Box::new(LabelPrimed::new(3)), TokenEstimator::default());
    handle_primed.init(&config)?;
    let mut memory = Memory::default();
    for example in &dataset.train {
        handle_primed.learn(example, &trace)?;
        memory.push(example.clone());
    }
    for query in &dataset.test {
        mock.clear();
        handle_primed.predict(query, 0, &mock, &trace)?;
        let prompt = mock.calls()[0].final_user_message().to_string();
        let at = |needle: &str| prompt.find(needle).ok_or_else(|| anyhow!("missing {needle:?}"));
        let primer = at("Valid labels (answer with exactly one):")?;
        let coverage = at("One relevant example per label:")?;
        ensure!(primer < coverage, "primer after examples");
        if let Some(contrast) = prompt.find("Similar inputs with different labels:") {
            ensure!(coverage < contrast, "contrastive pairs before coverage");
        }

        let (plan, selection) = label_primed_plan(&config, &mut memory, &query.input_text, 3);
        ensure!(plan.is_well_formed());
        let kinds = plan.kinds();
        let first_example = kinds.iter().position(|k| matches!(k, SectionKind::Coverage | SectionKind::Contrastive));
        ensure!(kinds.iter().position(|k| *k == SectionKind::LabelPrimer) < first_example);
        let covered: Vec<&str> = selection.coverage.iter().map(|id| labels[id.as_str()]).collect();
        let distinct: BTreeSet<&str> = covered.iter().copied().collect();
        ensure!(covered.len() == distinct.len(), "two coverage examples share a label: {covered:?}");
        ensure!(!selection.pairs.is_empty() && selection.pairs.len() <= 3);
        ensure!(selection.pairs.iter().all(|(a, b)| labels[a.as_str()] != labels[b.as_str()]), "pair shares a label");
    }

    let evaluator = Evaluator::new(TokenEstimator::default());
    let mut zero = HarnessHandle::new("zs", build_native("zero_shot").map_err(|e| anyhow!(e))?, TokenEstimator::default());
    let result = evaluator.evaluate(&mut zero, &dataset, &mock, &trace)?;
    ensure!(result.score.mean_additional_context_tokens == 0.0, "zero-shot ctx {}", result.score.mean_additional_context_tokens);
    ensure!(result.per_example.iter().all(|o| o.additional_context_tokens == 0));
    Ok("draft 1/2 calls, label-primed order and coverage, zero-shot ctx 0".into())
}

fn qa_protocol() -> Result<String> {
    let dataset = Dataset::new("qa", TaskKind::Qa, Vec::new(), vec![Example::new("p1", "What is 2 + 3?", Some("5"))], None)?
        .with_samples(3);
    let mock = MockBackend::new(
        vec![
            MockRule::new("What is 2 + 3?", "so \\boxed{5}").on_sample(0),
            MockRule::new("What is 2 + 3?", "\\boxed{ 5 }").on_sample(1),
        ],
        Some("\\boxed{6}".into()),
        TokenEstimator::default(),
    );
    let evaluator = Evaluator::new(TokenEstimator::default());
    let program = build_native("math_retrieval:none").map_err(|e| anyhow!(e))?;
    let mut handle = HarnessHandle::new("qa", program, TokenEstimator::default());
    let result = evaluator.evaluate(&mut handle, &dataset, &mock, &MemoryTrace::default())?;
    ensure!(result.score.n_total == 3 && result.score.n_correct == 2, "{}/{}", result.score.n_correct, result.score.n_total);
    ensure!(result.score.accuracy == 2.0 / 3.0, "accuracy {}", result.score.accuracy);
    ensure!(mock.call_count() == 3, "{} calls", mock.call_count());
    Ok("3 samples, accuracy 2/3".into())
}

// ---------------------------------------------------------------------------

fn check(failures: &mut usize, name: &str, f: impl FnOnce() -> Result<String>) {
    let started = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let message = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(anyhow!("panicked: {message}"))
    });
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("PASS  {name} [{secs:.2}s] {detail}"),
        Err(e) => {
            *failures += 1;
            println!("FAIL  {name} [{secs:.2}s] {e:#}");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut shared = match Shared::new() {
        Ok(s) => s,
        Err(e) => {
            println!("FAIL  setup: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    check(&mut failures, "pareto_oracle_equivalence", pareto_oracle);
    check(&mut failures, "table_frontier_reconstruction", table_frontier);
    check(&mut failures, "search_budget_n20_k2", || search_budget(&mut shared));
    check(&mut failures, "validation_gate", || validation_gate(&shared));
    check(&mut failures, "replay_determinism", || replay_determinism(&shared));
    check(&mut failures, "bm25_exactness", bm25_exactness);
    check(&mut failures, "decontamination", decontamination);
    check(&mut failures, "route_pipelines", route_pipelines);
    check(&mut failures, "harness_call_contracts", call_contracts);
    check(&mut failures, "qa_sampling", qa_protocol);
    check(&mut failures, "kill_and_resume", || kill_and_resume(&shared));
    println!("{} of 11 criteria passed", 11 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
