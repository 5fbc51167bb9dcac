//! `metaharness`: run, inspect and report harness searches.
//!
//! Machine-readable output goes to stdout, diagnostics to stderr. Exit codes:
//! 0 success, 1 domain error, 2 usage error.

mod commands;
mod table;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "metaharness", version, about = "Search over LLM harness programs")]
struct Cli {
    /// Run directory.
    #[arg(long, global = true)]
    run: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a run from a search config.
    Init {
        #[arg(long)]
        config: PathBuf,
    },
    /// Register harness directories as seed candidates.
    Seed {
        /// `name=dir` pairs, or plain directories named after themselves.
        #[arg(required = true)]
        seeds: Vec<String>,
    },
    /// Run the validation gate on one candidate.
    Validate {
        candidate: String,
        /// Gate budget in seconds (default: the run config's).
        #[arg(long)]
        timeout: Option<f64>,
    },
    /// Evaluate one candidate and print its score report.
    Eval {
        candidate: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Search)]
        split: SplitArg,
        /// Restrict to these dataset ids.
        #[arg(long)]
        dataset: Vec<String>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Run (or resume) the search loop and print the frontier.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Return after this iteration completes.
        #[arg(long)]
        stop_after: Option<u32>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Print the Pareto frontier as CSV.
    Frontier,
    /// Print the K best evaluated candidates by one metric as CSV.
    Top {
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value = "accuracy")]
        by: String,
    },
    /// Unified diff of two candidates' sources plus metric deltas.
    Diff { a: String, b: String },
    /// Write frontier.csv and best_so_far.csv.
    Report {
        /// Output directory (default: <run>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List every candidate with status as CSV.
    List,
    /// Retrieval corpus pipelines.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Serve a built-in harness over the stdio protocol.
    #[command(hide = true)]
    HarnessServe { native: String },
    /// Queue-driven test proposer.
    #[command(hide = true)]
    ProposeFromQueue {
        #[arg(long)]
        queue: PathBuf,
        #[arg(long, env = "MH_DROP_DIR")]
        drop: PathBuf,
        #[arg(long, env = "MH_ITERATION")]
        iteration: u32,
        #[arg(long, env = "MH_K")]
        k: u32,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Read raw JSONL problem files into one corpus.
    Ingest {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = mh_retrieval::corpus::INGEST_SOLUTION_CHARS)]
        max_solution_chars: usize,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Remove corpus entries overlapping evaluation problems.
    Decontaminate {
        #[arg(long)]
        corpus: PathBuf,
        /// JSONL files whose `problem` (or `text`) fields are held out.
        #[arg(long = "eval", required = true)]
        eval: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        prefix_len: usize,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
    },
    /// Route a problem and print what would be retrieved, as JSON.
    Query {
        #[arg(long)]
        corpus: PathBuf,
        problem: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Search,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKindArg {
    Mock,
    Replay,
    Http,
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Override the configured backend kind.
    #[arg(long, value_enum)]
    backend: Option<BackendKindArg>,
    /// Candidate whose traces a replay backend serves (default: the one evaluated).
    #[arg(long)]
    replay_source: Option<String>,
}

/// Bad invocation detected after parsing; exits 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_target(false)
        .init();
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
