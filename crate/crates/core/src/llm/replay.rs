use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use super::{BackendError, CallContext, LlmBackend, LlmRequest, LlmResponse};
use crate::store::{sanitize, EventKind, Run, TraceEvent};

/// Serves the `model_output` events of recorded traces, in order, per
/// (dataset, example). Stateful: one evaluation stream at a time.
pub struct ReplayBackend {
    id: String,
    log: HashMap<(String, String), Vec<LlmResponse>>,
    cursor: Mutex<HashMap<(String, String), usize>>,
}

impl ReplayBackend {
    pub fn from_run(run: &Run, candidate_id: &str) -> Result<Self, BackendError> {
        run.candidate(candidate_id)?;
        Ok(Self::from_traces(&format!("replay:{candidate_id}"), run.traces(candidate_id)?))
    }

    /// `traces` keys are the on-disk (dataset, example) names.
    pub fn from_traces(id: &str, traces: BTreeMap<(String, String), Vec<TraceEvent>>) -> Self {
        let mut log = HashMap::new();
        for (key, events) in traces {
            let mut responses = Vec::new();
            let mut prompt_tokens = 0;
            for event in events {
                match event.kind {
                    EventKind::Prompt => prompt_tokens = event.token_count.unwrap_or(0),
                    EventKind::ModelOutput => responses.push(LlmResponse {
                        completion_tokens: event.token_count.unwrap_or(0),
                        content: event.payload,
                        prompt_tokens,
                        backend_id: id.to_string(),
                    }),
                    _ => {}
                }
            }
            log.insert(key, responses);
        }
        Self { id: id.to_string(), log, cursor: Mutex::new(HashMap::new()) }
    }

    /// Rewind every stream to its first response.
    pub fn reset(&self) {
        self.cursor.lock().expect("replay cursor").clear();
    }
}

impl LlmBackend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &LlmRequest, ctx: &CallContext) -> Result<LlmResponse, BackendError> {
        request.validate()?;
        let key = (sanitize(&ctx.dataset_id), sanitize(&ctx.example_id));
        let mut cursor = self.cursor.lock().expect("replay cursor");
        let ordinal = cursor.entry(key.clone()).or_insert(0);
        let hit = self.log.get(&key).and_then(|r| r.get(*ordinal)).cloned();
        match hit {
            Some(response) => {
                *ordinal += 1;
                Ok(response)
            }
            None => Err(BackendError::ReplayMiss {
                dataset_id: ctx.dataset_id.clone(),
                example_id: ctx.example_id.clone(),
                ordinal: *ordinal,
            }),
        }
    }
}
