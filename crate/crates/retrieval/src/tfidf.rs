//! TF-IDF vectors with cosine nearest-neighbour lookup.
//!
//! Raw term counts, `idf = ln(N / df) + 1`, L2-normalised vectors. Query
//! terms that never occur in the indexed documents are ignored.

use std::collections::HashMap;

use crate::tokenize::math_tokenize;
use crate::{Result, RetrievalError};

type SparseVec = Vec<(u32, f64)>;

#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    vocab: HashMap<String, u32>,
    idf: Vec<f64>,
    vectors: Vec<SparseVec>,
}

impl TfIdfIndex {
    pub fn build<I, T>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut vocab: HashMap<String, u32> = HashMap::new();
        let mut df: Vec<u32> = Vec::new();
        let mut counts: Vec<HashMap<u32, u32>> = Vec::new();

        for doc in docs {
            let mut tf: HashMap<u32, u32> = HashMap::new();
            for token in math_tokenize(doc.as_ref()) {
                let next = vocab.len() as u32;
                let id = *vocab.entry(token).or_insert(next);
                if id as usize == df.len() {
                    df.push(0);
                }
                *tf.entry(id).or_default() += 1;
            }
            for &id in tf.keys() {
                df[id as usize] += 1;
            }
            counts.push(tf);
        }
        if counts.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }

        let n = counts.len() as f64;
        let idf: Vec<f64> = df.iter().map(|&d| (n / f64::from(d)).ln() + 1.0).collect();
        let vectors = counts
            .into_iter()
            .map(|tf| {
                normalize(
                    tf.into_iter()
                        .map(|(id, c)| (id, f64::from(c) * idf[id as usize]))
                        .collect(),
                )
            })
            .collect();

        Ok(Self { vocab, idf, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn vectorize(&self, text: &str) -> SparseVec {
        let mut tf: HashMap<u32, u32> = HashMap::new();
        for token in math_tokenize(text) {
            if let Some(&id) = self.vocab.get(&token) {
                *tf.entry(id).or_default() += 1;
            }
        }
        normalize(
            tf.into_iter()
                .map(|(id, c)| (id, f64::from(c) * self.idf[id as usize]))
                .collect(),
        )
    }

    /// Cosine similarity of `query` against every document, in insertion order.
    pub fn similarities(&self, query: &str) -> Vec<f64> {
        let q = self.vectorize(query);
        self.vectors.iter().map(|v| dot(&q, v)).collect()
    }

    /// Cosine similarity of stored document `doc` against every document.
    pub fn doc_similarities(&self, doc: usize) -> Vec<f64> {
        let q = &self.vectors[doc];
        self.vectors.iter().map(|v| dot(q, v)).collect()
    }

    /// The `k` most similar documents as `(position, similarity)`, highest
    /// first, ties in insertion order. `k` beyond the corpus size returns
    /// every document.
    pub fn top_k(&self, query: &str, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        Ok(rank(self.similarities(query), k))
    }
}

/// Sort `(position, similarity)` descending by similarity, stable on position.
pub(crate) fn rank(sims: Vec<f64>, k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = sims.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    ranked.truncate(k);
    ranked
}

fn normalize(mut v: SparseVec) -> SparseVec {
    v.sort_unstable_by_key(|&(id, _)| id);
    let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in &mut v {
            *w /= norm;
        }
    }
    v
}

fn dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}
