//! Token-set Jaccard similarity, greedy near-duplicate filtering, and
//! decontamination of a corpus against evaluation problems.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusEntry;
use crate::tokenize::math_tokenize;

pub type TokenSet = HashSet<String>;

pub fn token_set(text: &str) -> TokenSet {
    math_tokenize(text).into_iter().collect()
}

pub fn jaccard_sets(a: &TokenSet, b: &TokenSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// |T(a) ∩ T(b)| / |T(a) ∪ T(b)| over math token sets; two empty sets are
/// identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    jaccard_sets(&token_set(a), &token_set(b))
}

/// Greedy scan in the given (score) order: keep an item iff its Jaccard
/// similarity with every kept item is below `threshold`, up to `max_keep`.
pub fn dedup<T, F>(items: Vec<T>, text_of: F, max_keep: usize, threshold: f64) -> Vec<T>
where
    F: Fn(&T) -> &str,
{
    let mut kept: Vec<T> = Vec::new();
    let mut kept_sets: Vec<TokenSet> = Vec::new();
    for item in items {
        if kept.len() >= max_keep {
            break;
        }
        let set = token_set(text_of(&item));
        if kept_sets.iter().all(|k| jaccard_sets(k, &set) < threshold) {
            kept_sets.push(set);
            kept.push(item);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCriterion {
    ExactPrefix,
    Jaccard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub entry_id: String,
    /// Index of the evaluation set and of the problem within it.
    pub eval_set: usize,
    pub eval_index: usize,
    pub criterion: MatchCriterion,
    /// Matched prefix length in characters, or the Jaccard similarity.
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecontaminationLog {
    pub removals: Vec<Removal>,
}

/// Lower-case, trim, and collapse whitespace runs.
pub fn normalize_problem(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn prefix(text: &str, len: usize) -> String {
    text.chars().take(len).collect()
}

/// Drop corpus entries that share the first `prefix_len` normalized
/// characters with an evaluation problem (or equal it outright when shorter),
/// or whose Jaccard similarity with one reaches `threshold`. The exact-prefix
/// test runs first; each removed entry is logged once with its first match.
pub fn decontaminate(
    corpus: Vec<CorpusEntry>,
    eval_sets: &[Vec<String>],
    prefix_len: usize,
    threshold: f64,
) -> (Vec<CorpusEntry>, DecontaminationLog) {
    let mut prefixes: HashMap<String, (usize, usize)> = HashMap::new();
    let mut eval_tokens: Vec<(usize, usize, TokenSet)> = Vec::new();
    for (set_idx, set) in eval_sets.iter().enumerate() {
        for (item_idx, problem) in set.iter().enumerate() {
            let norm = normalize_problem(problem);
            prefixes
                .entry(prefix(&norm, prefix_len))
                .or_insert((set_idx, item_idx));
            eval_tokens.push((set_idx, item_idx, token_set(problem)));
        }
    }

    let mut kept = Vec::with_capacity(corpus.len());
    let mut log = DecontaminationLog::default();
    for entry in corpus {
        let norm = normalize_problem(&entry.problem);
        let key = prefix(&norm, prefix_len);
        if let Some(&(eval_set, eval_index)) = prefixes.get(&key) {
            log.removals.push(Removal {
                entry_id: entry.entry_id.clone(),
                eval_set,
                eval_index,
                criterion: MatchCriterion::ExactPrefix,
                value: key.chars().count() as f64,
            });
            continue;
        }
        let tokens = token_set(&entry.problem);
        let hit = eval_tokens
            .iter()
            .map(|(s, i, t)| (*s, *i, jaccard_sets(&tokens, t)))
            .find(|&(_, _, j)| j >= threshold);
        match hit {
            Some((eval_set, eval_index, value)) => log.removals.push(Removal {
                entry_id: entry.entry_id.clone(),
                eval_set,
                eval_index,
                criterion: MatchCriterion::Jaccard,
                value,
            }),
            None => kept.push(entry),
        }
    }
    (kept, log)
}
