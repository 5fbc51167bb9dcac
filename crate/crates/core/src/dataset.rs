//! Task datasets: JSON Lines or CSV files mapped onto [`Example`]s.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::harness::{Example, TaskConfig, TaskKind};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: record {record} has no {key:?} field")]
    SchemaError { path: PathBuf, record: usize, key: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid dataset {id}: {message}")]
    Invalid { id: String, message: String },
}

type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// `.csv` is CSV, anything else JSON Lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

/// Field names of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyMapping {
    pub id: String,
    pub text: String,
    pub label: String,
    pub answer: String,
}

impl Default for KeyMapping {
    fn default() -> Self {
        Self { id: "id".into(), text: "text".into(), label: "label".into(), answer: "answer".into() }
    }
}

impl KeyMapping {
    fn target(&self, kind: TaskKind) -> &str {
        match kind {
            TaskKind::OnlineClassification => &self.label,
            TaskKind::Qa => &self.answer,
        }
    }
}

fn scalar(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Read labeled examples from `path`; the target column is `label` for
/// classification and `answer` for QA.
pub fn load_examples(path: &Path, format: DataFormat, keys: &KeyMapping, kind: TaskKind) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.into(), source })?;
    let target = keys.target(kind);
    let missing = |record: usize, key: &str| DatasetError::SchemaError { path: path.into(), record, key: key.into() };
    let mut out = Vec::new();
    match format {
        DataFormat::Jsonl => {
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let row: Value = serde_json::from_str(line)
                    .map_err(|e| DatasetError::Parse { path: path.into(), message: format!("line {}: {e}", n + 1) })?;
                let get = |key: &str| row.get(key).and_then(scalar).ok_or_else(|| missing(out.len() + 1, key));
                out.push(Example {
                    example_id: get(&keys.id)?,
                    input_text: get(&keys.text)?,
                    label: Some(get(target)?),
                });
            }
        }
        DataFormat::Csv => {
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let headers = reader
                .headers()
                .map_err(|e| DatasetError::Parse { path: path.into(), message: e.to_string() })?
                .clone();
            let column = |key: &str| headers.iter().position(|h| h == key).ok_or_else(|| missing(0, key));
            let (id, txt, lab) = (column(&keys.id)?, column(&keys.text)?, column(target)?);
            for (n, row) in reader.records().enumerate() {
                let row = row.map_err(|e| DatasetError::Parse { path: path.into(), message: e.to_string() })?;
                let get = |i: usize, key: &str| row.get(i).map(str::to_string).ok_or_else(|| missing(n + 1, key));
                out.push(Example {
                    example_id: get(id, &keys.id)?,
                    input_text: get(txt, &keys.text)?,
                    label: Some(get(lab, target)?),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dataset_id: String,
    pub task_kind: TaskKind,
    pub label_set: Option<Vec<String>>,
    pub instruction: String,
    /// Delivered to `learn` in this order.
    pub train: Vec<Example>,
    /// Scored examples: the search split during search, the held-out test
    /// split in final evaluation.
    pub test: Vec<Example>,
    pub n_samples_per_item: u32,
    pub corpus_path: Option<PathBuf>,
}

impl Dataset {
    /// Checks ids are unique across both splits and, for classification,
    /// infers the sorted label set when none is given.
    pub fn new(
        dataset_id: &str,
        task_kind: TaskKind,
        train: Vec<Example>,
        test: Vec<Example>,
        label_set: Option<Vec<String>>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in train.iter().chain(&test) {
            if !seen.insert(e.example_id.as_str()) {
                return Err(DatasetError::DuplicateId(e.example_id.clone()));
            }
        }
        let invalid = |message: String| DatasetError::Invalid { id: dataset_id.into(), message };
        let label_set = match task_kind {
            TaskKind::Qa => None,
            TaskKind::OnlineClassification => {
                let present: BTreeSet<&str> = train.iter().chain(&test).filter_map(|e| e.label.as_deref()).collect();
                match label_set {
                    Some(given) => {
                        if let Some(stray) = present.iter().find(|l| !given.iter().any(|g| g == *l)) {
                            return Err(invalid(format!("label {stray:?} is not in the label set")));
                        }
                        Some(given)
                    }
                    None => Some(present.into_iter().map(str::to_string).collect()),
                }
            }
        };
        if label_set.as_ref().is_some_and(|l| l.is_empty()) {
            return Err(invalid("empty label set".into()));
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            task_kind,
            label_set,
            instruction: String::new(),
            train,
            test,
            n_samples_per_item: 1,
            corpus_path: None,
        })
    }

    pub fn with_instruction(mut self, instruction: &str) -> Self {
        self.instruction = instruction.into();
        self
    }

    pub fn with_samples(mut self, n: u32) -> Self {
        self.n_samples_per_item = n.max(1);
        self
    }

    pub fn with_corpus(mut self, path: Option<PathBuf>) -> Self {
        self.corpus_path = path;
        self
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            task_kind: self.task_kind,
            dataset_id: self.dataset_id.clone(),
            label_set: self.label_set.clone(),
            instruction: self.instruction.clone(),
            corpus_path: self.corpus_path.as_ref().map(|p| p.to_string_lossy().into_owned()),
        }
    }
}

/// Which scored split to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Search,
    Test,
}

/// A dataset as named in a run config: a train file plus separate search
/// and test files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: String,
    pub task_kind: TaskKind,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub search: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<DataFormat>,
    #[serde(default)]
    pub keys: KeyMapping,
    #[serde(default)]
    pub instruction: String,
    #[serde(default)]
    pub label_set: Option<Vec<String>>,
    /// Samples per QA problem.
    #[serde(default)]
    pub n_samples: Option<u32>,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
}

pub const DEFAULT_QA_SAMPLES: u32 = 3;

impl DatasetSpec {
    /// Relative paths are taken relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for path in [&mut self.train, &mut self.search, &mut self.test, &mut self.corpus].into_iter().flatten() {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    fn read(&self, path: &Path) -> Result<Vec<Example>> {
        let format = self.format.unwrap_or_else(|| DataFormat::from_path(path));
        load_examples(path, format, &self.keys, self.task_kind)
    }

    /// Load train plus one scored split. Only the requested split's file is
    /// opened.
    pub fn load(&self, split: Split) -> Result<Dataset> {
        let scored = match split {
            Split::Search => &self.search,
            Split::Test => &self.test,
        };
        let scored = scored.as_deref().ok_or_else(|| DatasetError::Invalid {
            id: self.id.clone(),
            message: format!("no {} split configured", if split == Split::Search { "search" } else { "test" }),
        })?;
        let train = match &self.train {
            Some(path) => self.read(path)?,
            None => Vec::new(),
        };
        let samples = match self.task_kind {
            TaskKind::Qa => self.n_samples.unwrap_or(DEFAULT_QA_SAMPLES),
            TaskKind::OnlineClassification => 1,
        };
        Ok(Dataset::new(&self.id, self.task_kind, train, self.read(scored)?, self.label_set.clone())?
            .with_instruction(&self.instruction)
            .with_samples(samples)
            .with_corpus(self.corpus.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(ext: &str, body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn jsonl_train_only() {
        let f = file(".jsonl", "{\"id\":1,\"text\":\"a\",\"label\":\"x\"}\n{\"id\":2,\"text\":\"b\",\"label\":\"y\"}\n\n{\"id\":3,\"text\":\"c\",\"label\":\"x\"}\n");
        let train = load_examples(f.path(), DataFormat::Jsonl, &KeyMapping::default(), TaskKind::OnlineClassification).unwrap();
        let ds = Dataset::new("d", TaskKind::OnlineClassification, train, vec![], None).unwrap();
        assert_eq!(ds.train.len(), 3);
        assert_eq!(ds.train[0].example_id, "1");
        assert_eq!(ds.label_set.unwrap(), ["x", "y"]);
    }

    #[test]
    fn label_set_is_sorted_inference() {
        let f = file(".jsonl", "{\"id\":\"1\",\"text\":\"a\",\"label\":\"b\"}\n{\"id\":\"2\",\"text\":\"b\",\"label\":\"a\"}\n");
        let ex = load_examples(f.path(), DataFormat::Jsonl, &KeyMapping::default(), TaskKind::OnlineClassification).unwrap();
        let ds = Dataset::new("d", TaskKind::OnlineClassification, ex, vec![], None).unwrap();
        assert_eq!(ds.label_set.unwrap(), ["a", "b"]);
    }

    #[test]
    fn duplicates_and_missing_columns() {
        let f = file(".jsonl", "{\"id\":\"1\",\"text\":\"a\",\"label\":\"b\"}\n{\"id\":\"1\",\"text\":\"b\",\"label\":\"a\"}\n");
        let ex = load_examples(f.path(), DataFormat::Jsonl, &KeyMapping::default(), TaskKind::OnlineClassification).unwrap();
        assert!(matches!(
            Dataset::new("d", TaskKind::OnlineClassification, ex, vec![], None),
            Err(DatasetError::DuplicateId(id)) if id == "1"
        ));
        let f = file(".jsonl", "{\"id\":\"1\",\"body\":\"a\",\"label\":\"b\"}\n");
        assert!(matches!(
            load_examples(f.path(), DataFormat::Jsonl, &KeyMapping::default(), TaskKind::OnlineClassification),
            Err(DatasetError::SchemaError { key, .. }) if key == "text"
        ));
        let f = file(".csv", "id,body,label\n1,a,b\n");
        assert!(matches!(
            load_examples(f.path(), DataFormat::Csv, &KeyMapping::default(), TaskKind::OnlineClassification),
            Err(DatasetError::SchemaError { .. })
        ));
    }

    #[test]
    fn csv_with_custom_keys() {
        let f = file(".csv", "qid,problem,solution\np1,\"1+1, then double\",4\n");
        let keys = KeyMapping { id: "qid".into(), text: "problem".into(), answer: "solution".into(), ..Default::default() };
        let ex = load_examples(f.path(), DataFormat::from_path(f.path()), &keys, TaskKind::Qa).unwrap();
        assert_eq!(ex, [Example::new("p1", "1+1, then double", Some("4"))]);
    }

    #[test]
    fn explicit_label_set_must_cover_data() {
        let ex = vec![Example::new("1", "a", Some("z"))];
        assert!(Dataset::new("d", TaskKind::OnlineClassification, ex, vec![], Some(vec!["a".into()])).is_err());
    }

    #[test]
    fn search_load_never_opens_the_test_file() {
        let search = file(".jsonl", "{\"id\":\"s1\",\"text\":\"a\",\"label\":\"x\"}\n");
        let spec = DatasetSpec {
            id: "d".into(),
            task_kind: TaskKind::OnlineClassification,
            train: None,
            search: Some(search.path().into()),
            test: Some("/nonexistent/test.jsonl".into()),
            format: None,
            keys: KeyMapping::default(),
            instruction: String::new(),
            label_set: None,
            n_samples: None,
            corpus: None,
        };
        assert_eq!(spec.load(Split::Search).unwrap().test.len(), 1);
        assert!(spec.load(Split::Test).is_err());
    }
}
