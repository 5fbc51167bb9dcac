//! Built-in harnesses: the hand-designed baselines for online classification
//! and math answering, launchable in-process by name (`native = "..."`).

mod classify;
mod math;
mod prompt;

pub use classify::{
    few_shot_plan, label_primed_plan, parse_label, DraftVerification, FewShot, LabelPrimed, LabelPrimedSelection,
    Memory, Shots, DEFAULT_CONTRASTIVE_PAIRS, DRAFT_MIN_MEMORY,
};
pub use math::{math_plan, MathRetrieval, NO_ANSWER};
pub use prompt::{canonical_prompt, label_listing, query_text, render_example, zero_shot_plan, PromptPlan, SectionKind};

use crate::harness::HarnessProgram;

/// Names accepted by [`build_native`].
pub const NATIVE_NAMES: &[&str] = &[
    "zero_shot",
    "few_shot:<n>",
    "few_shot:all",
    "draft_verification",
    "label_primed",
    "label_primed:<pairs>",
    "math_retrieval",
    "math_retrieval:none",
];

pub fn build_native(name: &str) -> Result<Box<dyn HarnessProgram>, String> {
    let (base, arg) = match name.split_once(':') {
        Some((b, a)) => (b, Some(a)),
        None => (name, None),
    };
    let bad = || format!("unknown native harness {name:?} (known: {})", NATIVE_NAMES.join(", "));
    let count = |a: &str| a.parse::<usize>().map_err(|_| bad());
    Ok(match (base, arg) {
        ("zero_shot", None) => Box::new(FewShot::zero_shot()),
        ("few_shot", Some("all")) => Box::new(FewShot::new(Shots::All)),
        ("few_shot", Some(n)) => Box::new(FewShot::new(Shots::Last(count(n)?))),
        ("draft_verification", None) => Box::new(DraftVerification::new()),
        ("label_primed", None) => Box::new(LabelPrimed::new(DEFAULT_CONTRASTIVE_PAIRS)),
        ("label_primed", Some(n)) => Box::new(LabelPrimed::new(count(n)?)),
        ("math_retrieval", None) => Box::new(MathRetrieval::new(true)),
        ("math_retrieval", Some("none")) => Box::new(MathRetrieval::new(false)),
        _ => return Err(bad()),
    })
}
