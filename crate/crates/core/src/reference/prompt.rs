//! Prompt composition shared by the reference harnesses.

use serde::Serialize;

use crate::harness::{Example, TaskConfig, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Instruction,
    LabelPrimer,
    Coverage,
    Contrastive,
    Examples,
    Query,
}

/// Ordered prompt sections; exactly one query section, last.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PromptPlan {
    pub sections: Vec<(SectionKind, String)>,
}

impl PromptPlan {
    pub fn push(&mut self, kind: SectionKind, text: String) {
        if !text.is_empty() {
            self.sections.push((kind, text));
        }
    }

    pub fn render(&self) -> String {
        self.sections.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join("\n\n")
    }

    pub fn kinds(&self) -> Vec<SectionKind> {
        self.sections.iter().map(|(k, _)| *k).collect()
    }

    pub fn is_well_formed(&self) -> bool {
        let queries = self.sections.iter().filter(|(k, _)| *k == SectionKind::Query).count();
        queries == 1 && self.sections.last().is_some_and(|(k, _)| *k == SectionKind::Query)
    }
}

pub fn label_listing(labels: &[String]) -> String {
    if labels.is_empty() {
        String::new()
    } else {
        format!("Valid labels: {}", labels.join(", "))
    }
}

pub fn render_example(example: &Example) -> String {
    format!("Input: {}\nLabel: {}", example.input_text, example.label.as_deref().unwrap_or(""))
}

pub fn render_examples<'a>(heading: &str, examples: impl IntoIterator<Item = &'a Example>) -> String {
    let body: Vec<String> = examples.into_iter().map(render_example).collect();
    if body.is_empty() {
        String::new()
    } else {
        format!("{heading}\n\n{}", body.join("\n\n"))
    }
}

pub fn query_text(config: &TaskConfig, input: &str) -> String {
    match config.task_kind {
        TaskKind::OnlineClassification => format!("Input: {input}\nLabel:"),
        TaskKind::Qa => format!("Problem: {input}\nAnswer:"),
    }
}

/// Instruction, label listing, query: the zero point of context accounting.
pub fn zero_shot_plan(config: &TaskConfig, input: &str) -> PromptPlan {
    let mut plan = PromptPlan::default();
    plan.push(SectionKind::Instruction, config.instruction.clone());
    plan.push(SectionKind::LabelPrimer, label_listing(config.labels()));
    plan.push(SectionKind::Query, query_text(config, input));
    plan
}

/// The canonical zero-shot prompt text for `input`.
pub fn canonical_prompt(config: &TaskConfig, input: &str) -> String {
    zero_shot_plan(config, input).render()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(instruction: &str, labels: &[&str]) -> TaskConfig {
        TaskConfig {
            task_kind: TaskKind::OnlineClassification,
            dataset_id: "d".into(),
            label_set: Some(labels.iter().map(|s| s.to_string()).collect()),
            instruction: instruction.into(),
            corpus_path: None,
        }
    }

    #[test]
    fn canonical_template_bytes() {
        assert_eq!(canonical_prompt(&config("", &["A"]), "x"), "Valid labels: A\n\nInput: x\nLabel:");
        assert_eq!(
            canonical_prompt(&config("Classify.", &["a", "b"]), "text"),
            "Classify.\n\nValid labels: a, b\n\nInput: text\nLabel:"
        );
        let qa = TaskConfig { task_kind: TaskKind::Qa, label_set: None, ..config("Solve.", &[]) };
        assert_eq!(canonical_prompt(&qa, "1+1"), "Solve.\n\nProblem: 1+1\nAnswer:");
    }

    #[test]
    fn plans_end_with_their_query() {
        let plan = zero_shot_plan(&config("i", &["A"]), "q");
        assert!(plan.is_well_formed());
        assert_eq!(plan.kinds(), [SectionKind::Instruction, SectionKind::LabelPrimer, SectionKind::Query]);
    }
}
