use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{prompt_text, BackendError, CallContext, LlmBackend, LlmRequest, LlmResponse, TokenEstimator};

/// Fires when `pattern` and every `also` string are substrings of the final
/// user message and, if set, the request's sample index equals
/// `sample_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub also: Vec<String>,
}

impl MockRule {
    pub fn new(pattern: &str, output: &str) -> Self {
        Self { pattern: pattern.into(), output: output.into(), sample_index: None, also: Vec::new() }
    }

    pub fn on_sample(mut self, index: u32) -> Self {
        self.sample_index = Some(index);
        self
    }

    pub fn requiring(mut self, text: &str) -> Self {
        self.also.push(text.into());
        self
    }

    fn matches(&self, text: &str, sample_index: u32) -> bool {
        self.sample_index.is_none_or(|i| i == sample_index)
            && text.contains(&self.pattern)
            && self.also.iter().all(|a| text.contains(a.as_str()))
    }
}

/// Deterministic rule-table backend. Every request it serves is kept in a
/// call log.
pub struct MockBackend {
    rules: Vec<MockRule>,
    default_output: Option<String>,
    estimator: TokenEstimator,
    calls: Mutex<Vec<LlmRequest>>,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>, default_output: Option<String>, estimator: TokenEstimator) -> Self {
        Self { rules, default_output, estimator, calls: Mutex::new(Vec::new()) }
    }

    pub fn constant(output: &str) -> Self {
        Self::new(Vec::new(), Some(output.into()), TokenEstimator::default())
    }

    pub fn calls(&self) -> Vec<LlmRequest> {
        self.calls.lock().expect("call log").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("call log").len()
    }

    pub fn clear(&self) {
        self.calls.lock().expect("call log").clear();
    }

    fn lookup(&self, request: &LlmRequest) -> Option<&str> {
        let text = request.final_user_message();
        self.rules
            .iter()
            .find(|r| r.matches(text, request.sample_index))
            .map(|r| r.output.as_str())
            .or(self.default_output.as_deref())
    }
}

impl LlmBackend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &LlmRequest, _ctx: &CallContext) -> Result<LlmResponse, BackendError> {
        request.validate()?;
        self.calls.lock().expect("call log").push(request.clone());
        let content = self.lookup(request).ok_or(BackendError::MockMiss)?.to_string();
        Ok(LlmResponse {
            prompt_tokens: self.estimator.count(&prompt_text(&request.messages)),
            completion_tokens: self.estimator.count(&content),
            content,
            backend_id: self.id().to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn req(text: &str, sample_index: u32) -> LlmRequest {
        LlmRequest { messages: vec![ChatMessage::user(text)], max_output_tokens: 16, temperature: 0.0, sample_index }
    }

    fn ctx() -> CallContext {
        CallContext { dataset_id: "d".into(), example_id: "e".into() }
    }

    #[test]
    fn first_matching_rule_wins() {
        let mock = MockBackend::new(
            vec![MockRule::new("classify", "A"), MockRule::new("class", "B")],
            None,
            TokenEstimator::default(),
        );
        assert_eq!(mock.complete(&req("please classify", 0), &ctx()).unwrap().content, "A");
        assert_eq!(mock.complete(&req("a class", 0), &ctx()).unwrap().content, "B");
        assert!(matches!(mock.complete(&req("nothing", 0), &ctx()), Err(BackendError::MockMiss)));
        assert_eq!(mock.call_count(), 3);
    }

    #[test]
    fn required_substrings_must_all_appear() {
        let rule = MockRule::new("Input: q", "A").requiring("Label: A").requiring("Valid");
        let mock = MockBackend::new(vec![rule], Some("B".into()), TokenEstimator::default());
        assert_eq!(mock.complete(&req("Valid\nLabel: A\nInput: q", 0), &ctx()).unwrap().content, "A");
        assert_eq!(mock.complete(&req("Valid\nInput: q", 0), &ctx()).unwrap().content, "B");
    }

    #[test]
    fn matches_only_the_final_user_message() {
        let mock = MockBackend::new(vec![MockRule::new("key", "hit")], Some("miss".into()), TokenEstimator::default());
        let mut r = req("plain", 0);
        r.messages.insert(0, ChatMessage::system("key"));
        assert_eq!(mock.complete(&r, &ctx()).unwrap().content, "miss");
    }

    #[test]
    fn sample_filtered_rules() {
        let mock = MockBackend::new(
            vec![MockRule::new("q", "right").on_sample(0), MockRule::new("q", "right").on_sample(1)],
            Some("wrong".into()),
            TokenEstimator::default(),
        );
        let outs: Vec<String> = (0..3).map(|i| mock.complete(&req("q", i), &ctx()).unwrap().content).collect();
        assert_eq!(outs, ["right", "right", "wrong"]);
    }

    #[test]
    fn identical_requests_get_identical_responses() {
        let mock = MockBackend::constant("A");
        let a = mock.complete(&req("same", 0), &ctx()).unwrap();
        let b = mock.complete(&req("same", 0), &ctx()).unwrap();
        assert_eq!(a, b);
    }
}
