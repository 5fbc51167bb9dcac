//! Retrieval-augmented math answering over a solved-problem corpus.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde_json::json;

use super::prompt::{query_text, PromptPlan, SectionKind};
use crate::evaluator::normalize_answer;
use crate::harness::{Example, HarnessError, HarnessIo, HarnessProgram, Prediction, TaskConfig};
use crate::llm::ChatMessage;
use mh_retrieval::{load_corpus, route_retrieve, CorpusEntry, CorpusIndexes, RetrievalOutcome, RoutePolicies};

const MAX_OUTPUT_TOKENS: u32 = 1024;
const TEMPERATURE: f64 = 0.7;
pub const NO_ANSWER: &str = "<no answer>";

/// Indexes are built once per corpus file and shared by every instance in
/// the process.
fn cached_indexes(path: &Path) -> Result<Arc<CorpusIndexes>, HarnessError> {
    static CACHE: OnceLock<Mutex<HashMap<PathBuf, Arc<CorpusIndexes>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(hit) = guard.get(path) {
        return Ok(Arc::clone(hit));
    }
    let corpus = load_corpus(path).map_err(|e| HarnessError::Failed(format!("corpus {}: {e}", path.display())))?;
    let indexes = CorpusIndexes::build(corpus, RoutePolicies::default())
        .map_err(|e| HarnessError::Failed(format!("corpus {}: {e}", path.display())))?;
    let indexes = Arc::new(indexes);
    guard.insert(path.to_path_buf(), Arc::clone(&indexes));
    Ok(indexes)
}

pub fn math_plan(config: &TaskConfig, worked: &[CorpusEntry], problem: &str) -> PromptPlan {
    let mut plan = PromptPlan::default();
    plan.push(SectionKind::Instruction, config.instruction.clone());
    let rendered: Vec<String> =
        worked.iter().map(|e| format!("Problem: {}\nSolution: {}", e.problem, e.solution)).collect();
    if !rendered.is_empty() {
        plan.push(SectionKind::Examples, format!("Worked examples:\n\n{}", rendered.join("\n\n")));
    }
    plan.push(SectionKind::Query, query_text(config, problem));
    plan
}

/// With `retrieve` off no examples are added and the prompt is the
/// zero-shot baseline.
pub struct MathRetrieval {
    retrieve: bool,
    config: Option<TaskConfig>,
    indexes: Option<Arc<CorpusIndexes>>,
}

impl MathRetrieval {
    pub fn new(retrieve: bool) -> Self {
        Self { retrieve, config: None, indexes: None }
    }

    fn retrieve(&self, problem: &str) -> Result<Option<RetrievalOutcome>, HarnessError> {
        match &self.indexes {
            Some(indexes) => route_retrieve(problem, indexes).map(Some).map_err(|e| HarnessError::Failed(e.to_string())),
            None => Ok(None),
        }
    }
}

impl HarnessProgram for MathRetrieval {
    fn init(&mut self, config: &TaskConfig) -> Result<(), HarnessError> {
        if self.retrieve {
            let path = config
                .corpus_path
                .as_deref()
                .ok_or_else(|| HarnessError::InvalidInput("math retrieval needs corpus_path".into()))?;
            self.indexes = Some(cached_indexes(Path::new(path))?);
        }
        self.config = Some(config.clone());
        Ok(())
    }

    fn learn(&mut self, example: &Example, io: &mut dyn HarnessIo) -> Result<(), HarnessError> {
        io.state(&format!("ignored {}", example.example_id))
    }

    fn predict(&mut self, query: &Example, io: &mut dyn HarnessIo) -> Result<Prediction, HarnessError> {
        let config = self.config.clone().ok_or_else(|| HarnessError::Failed("not initialized".into()))?;
        let outcome = self.retrieve(&query.input_text)?;
        let worked = outcome.as_ref().map(|o| o.entries.as_slice()).unwrap_or(&[]);
        let plan = math_plan(&config, worked, &query.input_text);
        let response = io.complete(vec![ChatMessage::user(plan.render())], MAX_OUTPUT_TOKENS, TEMPERATURE)?;
        let answer = normalize_answer(&response.content);
        let aux = outcome.map(|o| {
            json!({
                "route": o.route.as_str(),
                "references": o.references,
                "retrieved": o.entries.iter().map(|e| e.entry_id.clone()).collect::<Vec<_>>(),
            })
        });
        Ok(Prediction {
            example_id: query.example_id.clone(),
            label: if answer.is_empty() { NO_ANSWER.to_string() } else { answer },
            aux,
        })
    }
}
