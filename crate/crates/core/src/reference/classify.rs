//! Online text-classification harnesses: zero-shot, few-shot,
//! draft-verification and label-primed.

use serde_json::json;

use super::prompt::{label_listing, query_text, render_example, render_examples, zero_shot_plan, PromptPlan, SectionKind};
use crate::harness::{Example, HarnessError, HarnessIo, HarnessProgram, Prediction, TaskConfig};
use crate::llm::ChatMessage;
use mh_retrieval::TfIdfIndex;

const MAX_OUTPUT_TOKENS: u32 = 64;

/// Locate a label in free text: the label-set member whose first
/// word-bounded, case-folded occurrence is earliest (longest on ties); if
/// none occurs on word boundaries, the same rule over plain substrings.
pub fn parse_label(response: &str, labels: &[String]) -> Option<String> {
    let hay = response.to_lowercase();
    let bounded = |text: &str, at: usize, len: usize| {
        let before = text[..at].chars().next_back();
        let after = text[at + len..].chars().next();
        !before.is_some_and(|c| c.is_alphanumeric() || c == '_') && !after.is_some_and(|c| c.is_alphanumeric() || c == '_')
    };
    for require_bounds in [true, false] {
        let mut best: Option<(usize, usize, &String)> = None;
        for label in labels {
            let needle = label.to_lowercase();
            if needle.is_empty() {
                continue;
            }
            let hit = hay
                .match_indices(&needle)
                .map(|(i, _)| i)
                .find(|&i| !require_bounds || bounded(&hay, i, needle.len()));
            if let Some(pos) = hit {
                let better = match best {
                    None => true,
                    Some((bp, bl, _)) => pos < bp || (pos == bp && needle.len() > bl),
                };
                if better {
                    best = Some((pos, needle.len(), label));
                }
            }
        }
        if let Some((_, _, label)) = best {
            return Some(label.clone());
        }
    }
    None
}

/// Parsed label, else the trimmed response (never empty).
fn final_label(response: &str, config: &TaskConfig) -> String {
    parse_label(response, config.labels()).unwrap_or_else(|| {
        let trimmed = response.trim();
        if trimmed.is_empty() {
            "(none)".to_string()
        } else {
            trimmed.to_string()
        }
    })
}

fn ask(io: &mut dyn HarnessIo, plan: &PromptPlan) -> Result<String, HarnessError> {
    Ok(io.complete(vec![ChatMessage::user(plan.render())], MAX_OUTPUT_TOKENS, 0.0)?.content)
}

fn configured(config: &Option<TaskConfig>) -> Result<&TaskConfig, HarnessError> {
    config.as_ref().ok_or_else(|| HarnessError::Failed("not initialized".into()))
}

/// Labeled examples in arrival order with a TF-IDF index over their inputs,
/// rebuilt on the first read after a write.
#[derive(Debug, Default, Clone)]
pub struct Memory {
    examples: Vec<Example>,
    index: Option<TfIdfIndex>,
}

impl Memory {
    pub fn push(&mut self, example: Example) {
        self.examples.push(example);
        self.index = None;
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    fn index(&mut self) -> Option<&TfIdfIndex> {
        if self.index.is_none() && !self.examples.is_empty() {
            self.index = TfIdfIndex::build(self.examples.iter().map(|e| e.input_text.as_str())).ok();
        }
        self.index.as_ref()
    }

    /// Every memory position ranked by similarity to `text`, most similar
    /// first, ties in arrival order.
    pub fn ranked(&mut self, text: &str) -> Vec<usize> {
        match self.index() {
            Some(index) => index.top_k(text, index.len()).map(|r| r.into_iter().map(|(i, _)| i).collect()).unwrap_or_default(),
            None => Vec::new(),
        }
    }

    /// Positions ranked by similarity to stored example `pos`, itself excluded.
    fn ranked_from(&mut self, pos: usize) -> Vec<usize> {
        let Some(index) = self.index() else { return Vec::new() };
        let mut ranked: Vec<(usize, f64)> = index.doc_similarities(pos).into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        ranked.into_iter().map(|(i, _)| i).filter(|&i| i != pos).collect()
    }

    fn label(&self, pos: usize) -> &str {
        self.examples[pos].label.as_deref().unwrap_or("")
    }
}

fn remember(memory: &mut Memory, example: &Example, io: &mut dyn HarnessIo) -> Result<(), HarnessError> {
    memory.push(example.clone());
    io.state(&json!({"memory_size": memory.len(), "added": example.example_id}).to_string())
}

/// How many recent examples a few-shot prompt shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shots {
    Last(usize),
    All,
}

/// Instruction + the last n memory examples + query. With n = 0 this is the
/// zero-shot harness.
pub struct FewShot {
    shots: Shots,
    config: Option<TaskConfig>,
    memory: Memory,
}

impl FewShot {
    pub fn new(shots: Shots) -> Self {
        Self { shots, config: None, memory: Memory::default() }
    }

    pub fn zero_shot() -> Self {
        Self::new(Shots::Last(0))
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }
}

pub fn few_shot_plan(config: &TaskConfig, memory: &[Example], shots: Shots, input: &str) -> PromptPlan {
    let n = match shots {
        Shots::All => memory.len(),
        Shots::Last(n) => n.min(memory.len()),
    };
    let mut plan = zero_shot_plan(config, input);
    let query = plan.sections.pop().expect("zero-shot plan ends with its query");
    plan.push(SectionKind::Examples, render_examples("Examples:", &memory[memory.len() - n..]));
    plan.sections.push(query);
    plan
}

impl HarnessProgram for FewShot {
    fn init(&mut self, config: &TaskConfig) -> Result<(), HarnessError> {
        self.config = Some(config.clone());
        Ok(())
    }

    fn learn(&mut self, example: &Example, io: &mut dyn HarnessIo) -> Result<(), HarnessError> {
        remember(&mut self.memory, example, io)
    }

    fn predict(&mut self, query: &Example, io: &mut dyn HarnessIo) -> Result<Prediction, HarnessError> {
        let config = configured(&self.config)?;
        let plan = few_shot_plan(config, self.memory.examples(), self.shots, &query.input_text);
        let response = ask(io, &plan)?;
        Ok(Prediction { example_id: query.example_id.clone(), label: final_label(&response, config), aux: None })
    }
}

/// Below this memory size the two-call procedure is skipped.
pub const DRAFT_MIN_MEMORY: usize = 5;
const DRAFT_NEIGHBOURS: usize = 5;
const CONFIRMERS: usize = 5;
const CHALLENGERS: usize = 5;

/// Draft a label from the nearest examples, then verify it against
/// same-label confirmers and different-label challengers.
pub struct DraftVerification {
    config: Option<TaskConfig>,
    memory: Memory,
}

impl DraftVerification {
    pub fn new() -> Self {
        Self { config: None, memory: Memory::default() }
    }
}

impl Default for DraftVerification {
    fn default() -> Self {
        Self::new()
    }
}

impl HarnessProgram for DraftVerification {
    fn init(&mut self, config: &TaskConfig) -> Result<(), HarnessError> {
        self.config = Some(config.clone());
        Ok(())
    }

    fn learn(&mut self, example: &Example, io: &mut dyn HarnessIo) -> Result<(), HarnessError> {
        remember(&mut self.memory, example, io)
    }

    fn predict(&mut self, query: &Example, io: &mut dyn HarnessIo) -> Result<Prediction, HarnessError> {
        let config = configured(&self.config)?.clone();
        if self.memory.len() < DRAFT_MIN_MEMORY {
            let plan = few_shot_plan(&config, self.memory.examples(), Shots::All, &query.input_text);
            let response = ask(io, &plan)?;
            return Ok(Prediction {
                example_id: query.example_id.clone(),
                label: final_label(&response, &config),
                aux: Some(json!({"mode": "few_shot_fallback"})),
            });
        }

        let ranked = self.memory.ranked(&query.input_text);
        let examples = self.memory.examples();
        let draft_plan = few_shot_plan(
            &config,
            &ranked.iter().take(DRAFT_NEIGHBOURS).rev().map(|&i| examples[i].clone()).collect::<Vec<_>>(),
            Shots::All,
            &query.input_text,
        );
        let draft = final_label(&ask(io, &draft_plan)?, &config);

        let confirmers: Vec<usize> =
            ranked.iter().copied().filter(|&i| self.memory.label(i) == draft).take(CONFIRMERS).collect();
        let challengers: Vec<usize> =
            ranked.iter().copied().filter(|&i| self.memory.label(i) != draft).take(CHALLENGERS).collect();
        let mut plan = PromptPlan::default();
        plan.push(SectionKind::Instruction, config.instruction.clone());
        plan.push(SectionKind::LabelPrimer, label_listing(config.labels()));
        plan.push(
            SectionKind::Examples,
            render_examples(
                &format!("Examples labeled {draft}:"),
                confirmers.iter().map(|&i| &self.memory.examples()[i]),
            ),
        );
        plan.push(
            SectionKind::Examples,
            render_examples("Similar examples with other labels:", challengers.iter().map(|&i| &self.memory.examples()[i])),
        );
        plan.push(
            SectionKind::Query,
            format!(
                "A first pass labeled the input below as {draft}. Keep that label or revise it using the examples above.\n\n{}",
                query_text(&config, &query.input_text)
            ),
        );
        let response = ask(io, &plan)?;
        let id = |v: &[usize]| -> Vec<String> { v.iter().map(|&i| self.memory.examples()[i].example_id.clone()).collect() };
        Ok(Prediction {
            example_id: query.example_id.clone(),
            label: final_label(&response, &config),
            aux: Some(json!({
                "mode": "draft_verification",
                "draft": draft,
                "confirmers": id(&confirmers),
                "challengers": id(&challengers),
            })),
        })
    }
}

pub const DEFAULT_CONTRASTIVE_PAIRS: usize = 3;

/// What a label-primed prompt was built from, by memory example id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelPrimedSelection {
    pub coverage: Vec<String>,
    pub pairs: Vec<(String, String)>,
}

/// Label primer, one query-relevant example per label, then contrastive
/// pairs of similar examples with different labels.
pub struct LabelPrimed {
    pairs: usize,
    config: Option<TaskConfig>,
    memory: Memory,
    last_plan: Option<PromptPlan>,
}

impl LabelPrimed {
    pub fn new(pairs: usize) -> Self {
        Self { pairs, config: None, memory: Memory::default(), last_plan: None }
    }

    pub fn last_plan(&self) -> Option<&PromptPlan> {
        self.last_plan.as_ref()
    }
}

/// Build the label-primed prompt for `input` over `memory`.
pub fn label_primed_plan(
    config: &TaskConfig,
    memory: &mut Memory,
    input: &str,
    max_pairs: usize,
) -> (PromptPlan, LabelPrimedSelection) {
    let mut labels: Vec<String> = config.labels().to_vec();
    labels.sort();
    let mut plan = PromptPlan::default();
    plan.push(SectionKind::Instruction, config.instruction.clone());
    let primer: Vec<String> = labels.iter().map(|l| format!("- {l}")).collect();
    plan.push(SectionKind::LabelPrimer, format!("Valid labels (answer with exactly one):\n{}", primer.join("\n")));

    let mut selection = LabelPrimedSelection::default();
    let ranked = memory.ranked(input);
    if !ranked.is_empty() {
        let mut present: Vec<String> = memory.examples().iter().filter_map(|e| e.label.clone()).collect();
        present.sort();
        present.dedup();
        let coverage: Vec<usize> = present
            .iter()
            .filter_map(|label| ranked.iter().copied().find(|&i| memory.label(i) == label))
            .collect();

        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for &anchor in &ranked {
            if pairs.len() >= max_pairs {
                break;
            }
            let anchor_label = memory.label(anchor).to_string();
            let partner = memory.ranked_from(anchor).into_iter().find(|&j| memory.label(j) != anchor_label);
            if let Some(partner) = partner {
                let dup = pairs.iter().any(|&(a, b)| (a, b) == (anchor, partner) || (a, b) == (partner, anchor));
                if !dup {
                    pairs.push((anchor, partner));
                }
            }
        }

        let ex = memory.examples();
        plan.push(
            SectionKind::Coverage,
            render_examples("One relevant example per label:", coverage.iter().map(|&i| &ex[i])),
        );
        let rendered: Vec<String> = pairs
            .iter()
            .enumerate()
            .map(|(n, &(a, b))| format!("Pair {}:\n{}\n{}", n + 1, render_example(&ex[a]), render_example(&ex[b])))
            .collect();
        if !rendered.is_empty() {
            plan.push(
                SectionKind::Contrastive,
                format!("Similar inputs with different labels:\n\n{}", rendered.join("\n\n")),
            );
        }
        selection.coverage = coverage.iter().map(|&i| ex[i].example_id.clone()).collect();
        selection.pairs = pairs.iter().map(|&(a, b)| (ex[a].example_id.clone(), ex[b].example_id.clone())).collect();
    }
    plan.push(SectionKind::Query, query_text(config, input));
    (plan, selection)
}

impl HarnessProgram for LabelPrimed {
    fn init(&mut self, config: &TaskConfig) -> Result<(), HarnessError> {
        self.config = Some(config.clone());
        Ok(())
    }

    fn learn(&mut self, example: &Example, io: &mut dyn HarnessIo) -> Result<(), HarnessError> {
        remember(&mut self.memory, example, io)
    }

    fn predict(&mut self, query: &Example, io: &mut dyn HarnessIo) -> Result<Prediction, HarnessError> {
        let config = configured(&self.config)?.clone();
        if self.memory.is_empty() {
            io.state("label_primed: empty memory, primer-only prompt")?;
        }
        let (plan, selection) = label_primed_plan(&config, &mut self.memory, &query.input_text, self.pairs);
        let response = ask(io, &plan)?;
        self.last_plan = Some(plan);
        Ok(Prediction {
            example_id: query.example_id.clone(),
            label: final_label(&response, &config),
            aux: Some(json!({"coverage": selection.coverage, "pairs": selection.pairs})),
        })
    }
}
