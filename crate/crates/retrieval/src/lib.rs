//! Lexical retrieval for harness search.
//!
//! Everything here is deterministic and in-memory: a tokenizer that keeps
//! LaTeX commands and super/subscript groups intact, Okapi BM25 and TF-IDF
//! indexes, Jaccard-based near-duplicate filtering and corpus
//! decontamination, and the four-route math retrieval policy
//! ([`routes::route_retrieve`]).

pub mod bm25;
pub mod corpus;
mod error;
pub mod rerank;
pub mod router;
pub mod routes;
pub mod similarity;
pub mod tfidf;
pub mod tokenize;

pub use bm25::{Bm25Index, Bm25Params, ScoredDoc};
pub use corpus::{ingest_corpus, load_corpus, write_corpus, CorpusEntry};
pub use error::RetrievalError;
pub use rerank::{adaptive_k, default_techniques, rerank, RerankWeights, Reranked, TechniqueList};
pub use router::{KeywordSet, Route, Router};
pub use routes::{route_retrieve, CorpusIndexes, Keep, RetrievalOutcome, RouteConfig, RoutePolicies};
pub use similarity::{decontaminate, dedup, jaccard, DecontaminationLog, MatchCriterion, Removal};
pub use tfidf::TfIdfIndex;
pub use tokenize::math_tokenize;

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;
