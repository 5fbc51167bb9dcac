//! Score-based reranking and adaptive cut-off for retrieved corpus entries.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{truncate_chars, CorpusEntry};
use crate::router::KeywordSet;

const TECHNIQUES: &str = include_str!("../data/techniques.txt");

/// Technique cues searched for near the start of a solution.
pub type TechniqueList = KeywordSet;

pub fn default_techniques() -> TechniqueList {
    KeywordSet::parse(TECHNIQUES).expect("shipped technique list parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankWeights {
    /// Weight on difficulty / 10.
    pub alpha: f64,
    /// Weight on the early-technique bonus.
    pub beta: f64,
    /// Solution prefix (characters) searched for technique cues.
    pub technique_window: usize,
}

impl Default for RerankWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.2,
            technique_window: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reranked<'a> {
    pub entry: &'a CorpusEntry,
    pub bm25: f64,
    pub score: f64,
}

/// Reorder `(entry, bm25)` pairs by z-normalised BM25 + α·difficulty/10 +
/// β·bonus, descending, ties by entry id. The bonus is 1 when `techniques`
/// is given and one of its cues appears in the first `technique_window`
/// characters of the solution.
pub fn rerank<'a>(
    entries: &[(&'a CorpusEntry, f64)],
    weights: &RerankWeights,
    techniques: Option<&TechniqueList>,
) -> Vec<Reranked<'a>> {
    let n = entries.len() as f64;
    let mean = entries.iter().map(|(_, s)| s).sum::<f64>() / n.max(1.0);
    let var = entries.iter().map(|(_, s)| (s - mean).powi(2)).sum::<f64>() / n.max(1.0);
    let std = var.sqrt();

    let mut out: Vec<Reranked<'a>> = entries
        .iter()
        .map(|&(entry, bm25)| {
            let z = if std > 0.0 { (bm25 - mean) / std } else { 0.0 };
            let difficulty = entry.difficulty.unwrap_or(0.0) / 10.0;
            let bonus = match techniques {
                Some(list) => {
                    let head = truncate_chars(&entry.solution, weights.technique_window);
                    f64::from(u8::from(list.matches_text(head)))
                }
                None => 0.0,
            };
            Reranked {
                entry,
                bm25,
                score: z + weights.alpha * difficulty + weights.beta * bonus,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.entry.entry_id.cmp(&b.entry.entry_id))
    });
    out
}

/// `k_min` when the top score is at least 1.5× the mean of the top three
/// (padded with the last score when fewer exist), else `k_max`; never more
/// than the number of scores.
pub fn adaptive_k(scores: &[f64], k_min: usize, k_max: usize) -> usize {
    let Some(&top) = scores.first() else {
        return 0;
    };
    let last = *scores.iter().take(3).next_back().unwrap_or(&top);
    let head: Vec<f64> = (0..3).map(|i| *scores.get(i).unwrap_or(&last)).collect();
    let mean = head.iter().sum::<f64>() / 3.0;
    let k = if top >= 1.5 * mean { k_min } else { k_max };
    k.min(scores.len())
}
