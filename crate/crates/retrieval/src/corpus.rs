//! Solved-problem corpus rows and JSONL ingestion.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Result, RetrievalError};

/// Solutions longer than this are cut at ingestion time.
pub const INGEST_SOLUTION_CHARS: usize = 5_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    #[serde(rename = "id")]
    pub entry_id: String,
    pub problem: String,
    #[serde(default)]
    pub solution: String,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
    #[serde(default)]
    pub is_proof: bool,
}

impl CorpusEntry {
    pub fn new(
        id: impl Into<String>,
        problem: impl Into<String>,
        solution: impl Into<String>,
        source: impl Into<String>,
    ) -> Self {
        Self {
            entry_id: id.into(),
            problem: problem.into(),
            solution: solution.into(),
            source: source.into(),
            difficulty: None,
            is_proof: false,
        }
    }

    pub fn with_difficulty(mut self, difficulty: f64) -> Self {
        self.difficulty = Some(difficulty);
        self
    }
}

pub(crate) fn truncate_chars(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

/// Raw JSONL row; every key but `problem` is optional on disk.
#[derive(Deserialize)]
struct RawRow {
    id: Option<serde_json::Value>,
    problem: Option<String>,
    #[serde(default)]
    solution: Option<String>,
    source: Option<String>,
    difficulty: Option<f64>,
    #[serde(default)]
    is_proof: Option<bool>,
}

/// Read corpus files, truncating solutions to `max_solution_chars` and
/// dropping rows whose problem is empty. Missing ids default to
/// `<file stem>-<line>`, missing sources to the file stem.
pub fn ingest_corpus<P: AsRef<Path>>(files: &[P], max_solution_chars: usize) -> Result<Vec<CorpusEntry>> {
    let mut entries = Vec::new();
    for path in files {
        let path = path.as_ref();
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let file = File::open(path).map_err(|e| RetrievalError::io(path, e))?;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| RetrievalError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: RawRow = serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            let problem = row.problem.unwrap_or_default();
            if problem.trim().is_empty() {
                tracing::warn!(file = %path.display(), line = lineno + 1, "dropping corpus row with empty problem");
                continue;
            }
            if let Some(d) = row.difficulty {
                if !(0.0..=10.0).contains(&d) {
                    tracing::warn!(file = %path.display(), line = lineno + 1, difficulty = d, "dropping corpus row with out-of-range difficulty");
                    continue;
                }
            }
            let entry_id = match row.id {
                Some(serde_json::Value::String(s)) => s,
                Some(other) => other.to_string(),
                None => format!("{stem}-{}", lineno + 1),
            };
            let solution = row.solution.unwrap_or_default();
            entries.push(CorpusEntry {
                entry_id,
                problem,
                solution: truncate_chars(&solution, max_solution_chars).to_string(),
                source: row.source.unwrap_or_else(|| stem.clone()),
                difficulty: row.difficulty,
                is_proof: row.is_proof.unwrap_or(false),
            });
        }
    }
    Ok(entries)
}

/// Load an already-ingested corpus file without further truncation.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    ingest_corpus(&[path], usize::MAX)
}

pub fn write_corpus(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| RetrievalError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for entry in entries {
        let line = serde_json::to_string(entry).expect("corpus entries serialize");
        writeln!(out, "{line}").map_err(|e| RetrievalError::io(path, e))?;
    }
    out.flush().map_err(|e| RetrievalError::io(path, e))
}
