//! Okapi BM25 over an in-memory inverted index.
//!
//! score(D, Q) = Σ_{t ∈ Q} idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·|D|/avgdl))
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//!
//! Query terms are summed per occurrence, so a term repeated in the query
//! contributes once per repetition.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tokenize::math_tokenize;
use crate::{Result, RetrievalError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    /// Position of the document in build order.
    pub doc: usize,
    pub entry_id: String,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    postings: HashMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    /// Build an index over `(entry_id, text)` pairs.
    pub fn build<I, S, T>(docs: I, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut ids = Vec::new();
        let mut doc_lens = Vec::new();
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();

        for (doc, (id, text)) in docs.into_iter().enumerate() {
            let tokens = math_tokenize(text.as_ref());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for token in &tokens {
                *tf.entry(token.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((doc as u32, count));
            }
            ids.push(id.into());
            doc_lens.push(tokens.len() as u32);
        }
        if ids.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let total: u64 = doc_lens.iter().map(|&l| u64::from(l)).sum();
        let avg_len = total as f64 / ids.len() as f64;

        Ok(Self {
            params,
            ids,
            doc_lens,
            avg_len,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn entry_id(&self, doc: usize) -> &str {
        &self.ids[doc]
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score of every document in build order.
    pub fn scores(&self, query: &str) -> Result<Vec<f64>> {
        let terms = math_tokenize(query);
        if terms.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let Bm25Params { k1, b } = self.params;
        let mut scores = vec![0.0; self.ids.len()];
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(doc, tf) in list {
                let tf = f64::from(tf);
                let len_norm = if self.avg_len > 0.0 {
                    f64::from(self.doc_lens[doc as usize]) / self.avg_len
                } else {
                    0.0
                };
                scores[doc as usize] += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * len_norm));
            }
        }
        Ok(scores)
    }

    /// Top `top_k` documents with a positive score, score-descending, ties
    /// broken by entry id.
    pub fn search(&self, query: &str, top_k: usize) -> Result<Vec<ScoredDoc>> {
        let scores = self.scores(query)?;
        let mut hits: Vec<ScoredDoc> = scores
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .map(|(doc, score)| ScoredDoc {
                doc,
                entry_id: self.ids[doc].clone(),
                score,
            })
            .collect();
        hits.sort_by(compare_hits);
        hits.truncate(top_k);
        Ok(hits)
    }
}

pub(crate) fn compare_hits(a: &ScoredDoc, b: &ScoredDoc) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.entry_id.cmp(&b.entry_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct evaluation of the Okapi formula, written against raw token
    /// lists rather than the inverted index.
    fn okapi_oracle(docs: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<f64> {
        let n = docs.len() as f64;
        let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        docs.iter()
            .map(|doc| {
                let mut total = 0.0;
                for term in query {
                    let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
                    let tf = doc.iter().filter(|t| *t == term).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    total += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avg));
                }
                total
            })
            .collect()
    }

    fn fixture() -> Bm25Index {
        Bm25Index::build(
            [
                ("d1", "prime numbers"),
                ("d2", "prime factorization theorem"),
                ("d3", "triangle angle"),
            ],
            Bm25Params::default(),
        )
        .unwrap()
    }

    #[test]
    fn three_document_fixture_matches_hand_evaluation() {
        // frozen from an independent evaluation of the formula
        let expected = [0.4991762683023676, 0.42081720292932145, 0.0];
        let scores = fixture().scores("prime").unwrap();
        for (got, want) in scores.iter().zip(expected) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        let hits = fixture().search("prime", 10).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.entry_id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2"]);
    }

    #[test]
    fn unmatched_query_scores_zero_everywhere() {
        let idx = fixture();
        assert!(idx.scores("hexagon").unwrap().iter().all(|&s| s == 0.0));
        assert!(idx.search("hexagon", 5).unwrap().is_empty());
    }

    #[test]
    fn empty_query_is_rejected() {
        assert!(matches!(fixture().search("  ,; ", 3), Err(RetrievalError::EmptyQuery)));
    }

    #[test]
    fn empty_build_is_rejected() {
        let docs: Vec<(String, String)> = Vec::new();
        assert!(matches!(
            Bm25Index::build(docs, Bm25Params::default()),
            Err(RetrievalError::EmptyIndex)
        ));
    }

    #[test]
    fn duplicate_documents_tie_and_order_by_id() {
        let idx = Bm25Index::build(
            [("b", "modular arithmetic"), ("a", "modular arithmetic"), ("c", "graph")],
            Bm25Params::default(),
        )
        .unwrap();
        let hits = idx.search("modular", 5).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].score, hits[1].score);
        assert_eq!(hits[0].entry_id, "a");
        assert_eq!(hits[1].entry_id, "b");
    }

    proptest! {
        #[test]
        fn scores_match_formula_on_small_corpora(
            docs in prop::collection::vec(prop::collection::vec(0usize..6, 0..8), 1..=10),
            query in prop::collection::vec(0usize..7, 1..5),
            k1 in 0.1f64..3.0,
            b in 0.0f64..=1.0,
        ) {
            let vocab = ["alpha", "beta", "gamma", "delta", "prime", "angle", "nothing"];
            let docs: Vec<Vec<String>> = docs
                .iter()
                .map(|d| d.iter().map(|&i| vocab[i].to_string()).collect())
                .collect();
            let query: Vec<String> = query.iter().map(|&i| vocab[i].to_string()).collect();
            prop_assume!(docs.iter().any(|d| !d.is_empty()));

            let idx = Bm25Index::build(
                docs.iter().enumerate().map(|(i, d)| (format!("d{i}"), d.join(" "))),
                Bm25Params { k1, b },
            ).unwrap();
            let got = idx.scores(&query.join(" ")).unwrap();
            let want = okapi_oracle(&docs, &query, k1, b);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-9, "{} vs {}", g, w);
            }
        }
    }
}
