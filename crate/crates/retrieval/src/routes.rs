//! Four-route math retrieval: route the problem, then run only that route's
//! fetch → dedup → rerank → keep pipeline over BM25.
//!
//! | route          | fetch | dedup | rerank               | keep            |
//! |----------------|-------|-------|----------------------|-----------------|
//! | combinatorics  | 20    | 8     | lexical + difficulty | 3               |
//! | geometry       | 2     | -     | none                 | 1 hard ref + 2  |
//! | number theory  | 12    | -     | + technique bonus    | 3               |
//! | default        | 10    | -     | lexical + difficulty | adaptive (2..3) |

use serde::{Deserialize, Serialize};

use crate::bm25::{Bm25Index, Bm25Params, ScoredDoc};
use crate::corpus::{truncate_chars, CorpusEntry};
use crate::rerank::{adaptive_k, default_techniques, rerank, RerankWeights, TechniqueList};
use crate::router::{Route, Router};
use crate::similarity::dedup;
use crate::{Result, RetrievalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keep {
    Fixed(usize),
    Adaptive { k_min: usize, k_max: usize },
}

impl Keep {
    pub fn upper_bound(self) -> usize {
        match self {
            Keep::Fixed(n) => n,
            Keep::Adaptive { k_max, .. } => k_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteConfig {
    pub route: Route,
    pub fetch_k: usize,
    pub dedup_to: Option<usize>,
    pub keep: Keep,
    pub rerank: bool,
    pub technique_bonus: bool,
    /// Entries prepended from the hard-reference index.
    pub fixed_reference_count: usize,
}

impl RouteConfig {
    pub fn defaults(route: Route) -> Self {
        match route {
            Route::Combinatorics => Self {
                route,
                fetch_k: 20,
                dedup_to: Some(8),
                keep: Keep::Fixed(3),
                rerank: true,
                technique_bonus: false,
                fixed_reference_count: 0,
            },
            Route::Geometry => Self {
                route,
                fetch_k: 2,
                dedup_to: None,
                keep: Keep::Fixed(2),
                rerank: false,
                technique_bonus: false,
                fixed_reference_count: 1,
            },
            Route::NumberTheory => Self {
                route,
                fetch_k: 12,
                dedup_to: None,
                keep: Keep::Fixed(3),
                rerank: true,
                technique_bonus: true,
                fixed_reference_count: 0,
            },
            Route::Default => Self {
                route,
                fetch_k: 10,
                dedup_to: None,
                keep: Keep::Adaptive { k_min: 2, k_max: 3 },
                rerank: true,
                technique_bonus: false,
                fixed_reference_count: 0,
            },
        }
    }

    /// Most entries this route can return, hard references included.
    pub fn max_results(&self) -> usize {
        self.keep.upper_bound() + self.fixed_reference_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutePolicies {
    pub combinatorics: RouteConfig,
    pub geometry: RouteConfig,
    pub number_theory: RouteConfig,
    pub default: RouteConfig,
    pub dedup_threshold: f64,
    pub weights: RerankWeights,
    pub bm25: Bm25Params,
    /// Runtime filter: entries need a non-empty solution shorter than this.
    pub max_solution_chars: usize,
    /// Solutions are cut to this many characters when returned.
    pub prompt_solution_chars: usize,
    /// Hard-reference index holds entries with difficulty strictly above this.
    pub hard_min_difficulty: f64,
    /// Optionally restrict the hard-reference index to one corpus source.
    pub hard_source: Option<String>,
}

impl Default for RoutePolicies {
    fn default() -> Self {
        Self {
            combinatorics: RouteConfig::defaults(Route::Combinatorics),
            geometry: RouteConfig::defaults(Route::Geometry),
            number_theory: RouteConfig::defaults(Route::NumberTheory),
            default: RouteConfig::defaults(Route::Default),
            dedup_threshold: 0.8,
            weights: RerankWeights::default(),
            bm25: Bm25Params::default(),
            max_solution_chars: 4_000,
            prompt_solution_chars: 3_000,
            hard_min_difficulty: 6.0,
            hard_source: None,
        }
    }
}

impl RoutePolicies {
    pub fn for_route(&self, route: Route) -> &RouteConfig {
        match route {
            Route::Combinatorics => &self.combinatorics,
            Route::Geometry => &self.geometry,
            Route::NumberTheory => &self.number_theory,
            Route::Default => &self.default,
        }
    }
}

/// Runtime-filtered corpus with its main and hard-reference BM25 indexes.
#[derive(Debug, Clone)]
pub struct CorpusIndexes {
    entries: Vec<CorpusEntry>,
    main: Bm25Index,
    hard: Option<(Vec<usize>, Bm25Index)>,
    router: Router,
    techniques: TechniqueList,
    policies: RoutePolicies,
}

impl CorpusIndexes {
    pub fn build(corpus: Vec<CorpusEntry>, policies: RoutePolicies) -> Result<Self> {
        Self::with_router(corpus, policies, Router::default(), default_techniques())
    }

    pub fn with_router(
        corpus: Vec<CorpusEntry>,
        policies: RoutePolicies,
        router: Router,
        techniques: TechniqueList,
    ) -> Result<Self> {
        let entries: Vec<CorpusEntry> = corpus
            .into_iter()
            .filter(|e| {
                !e.solution.trim().is_empty() && e.solution.chars().count() < policies.max_solution_chars
            })
            .collect();
        if entries.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let main = Bm25Index::build(
            entries.iter().map(|e| (e.entry_id.clone(), e.problem.as_str())),
            policies.bm25,
        )?;
        let hard_positions: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                e.difficulty.is_some_and(|d| d > policies.hard_min_difficulty)
                    && policies.hard_source.as_ref().is_none_or(|s| &e.source == s)
            })
            .map(|(i, _)| i)
            .collect();
        let hard = if hard_positions.is_empty() {
            None
        } else {
            let index = Bm25Index::build(
                hard_positions
                    .iter()
                    .map(|&i| (entries[i].entry_id.clone(), entries[i].problem.as_str())),
                policies.bm25,
            )?;
            Some((hard_positions, index))
        };
        Ok(Self {
            entries,
            main,
            hard,
            router,
            techniques,
            policies,
        })
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn policies(&self) -> &RoutePolicies {
        &self.policies
    }

    pub fn main_index(&self) -> &Bm25Index {
        &self.main
    }

    /// Whether `entry_id` is in the hard-reference index.
    pub fn is_hard_reference(&self, entry_id: &str) -> bool {
        self.hard
            .as_ref()
            .is_some_and(|(pos, _)| pos.iter().any(|&i| self.entries[i].entry_id == entry_id))
    }

    fn hard_references(&self, problem: &str, count: usize) -> Vec<usize> {
        let Some((positions, index)) = &self.hard else {
            return Vec::new();
        };
        let mut picked: Vec<usize> = search_or_empty(index, problem, count)
            .into_iter()
            .map(|hit| positions[hit.doc])
            .collect();
        if picked.len() < count {
            // no lexical overlap: fall back to the hardest remaining entries
            let mut rest: Vec<usize> = positions.iter().copied().filter(|i| !picked.contains(i)).collect();
            rest.sort_by(|&a, &b| {
                let da = self.entries[a].difficulty.unwrap_or(0.0);
                let db = self.entries[b].difficulty.unwrap_or(0.0);
                db.total_cmp(&da)
                    .then_with(|| self.entries[a].entry_id.cmp(&self.entries[b].entry_id))
            });
            picked.extend(rest.into_iter().take(count - picked.len()));
        }
        picked
    }
}

fn search_or_empty(index: &Bm25Index, query: &str, k: usize) -> Vec<ScoredDoc> {
    index.search(query, k).unwrap_or_default()
}

/// What a route retrieved, with the intermediate candidate sets kept for
/// inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome {
    pub route: Route,
    /// Entry ids returned by the BM25 fetch, score order.
    pub fetched: Vec<String>,
    /// BM25 scores of `fetched`.
    pub fetched_scores: Vec<f64>,
    /// Entry ids surviving dedup (equal to `fetched` when the route has none).
    pub deduped: Vec<String>,
    /// Hard-reference entry ids prepended to the result.
    pub references: Vec<String>,
    /// Entries for the prompt, solutions truncated.
    pub entries: Vec<CorpusEntry>,
}

pub fn route_retrieve(problem: &str, indexes: &CorpusIndexes) -> Result<RetrievalOutcome> {
    let route = indexes.router.route_query(problem);
    let policies = &indexes.policies;
    let config = policies.for_route(route);

    let references = indexes.hard_references(problem, config.fixed_reference_count);
    let mut fetched = search_or_empty(&indexes.main, problem, config.fetch_k + references.len());
    fetched.retain(|hit| !references.contains(&hit.doc));
    fetched.truncate(config.fetch_k);

    let candidates: Vec<(&CorpusEntry, f64)> = fetched
        .iter()
        .map(|hit| (&indexes.entries[hit.doc], hit.score))
        .collect();
    let deduped = match config.dedup_to {
        Some(limit) => dedup(candidates.clone(), |(e, _)| e.problem.as_str(), limit, policies.dedup_threshold),
        None => candidates.clone(),
    };
    let ordered: Vec<&CorpusEntry> = if config.rerank {
        let techniques = config.technique_bonus.then_some(&indexes.techniques);
        rerank(&deduped, &policies.weights, techniques)
            .into_iter()
            .map(|r| r.entry)
            .collect()
    } else {
        deduped.iter().map(|(e, _)| *e).collect()
    };
    let keep = match config.keep {
        Keep::Fixed(n) => n,
        Keep::Adaptive { k_min, k_max } => {
            let scores: Vec<f64> = fetched.iter().map(|h| h.score).collect();
            adaptive_k(&scores, k_min, k_max)
        }
    };

    let entries = references
        .iter()
        .map(|&i| &indexes.entries[i])
        .chain(ordered.into_iter().take(keep))
        .map(|e| CorpusEntry {
            solution: truncate_chars(&e.solution, policies.prompt_solution_chars).to_string(),
            ..e.clone()
        })
        .collect();

    Ok(RetrievalOutcome {
        route,
        fetched: fetched.iter().map(|h| h.entry_id.clone()).collect(),
        fetched_scores: fetched.iter().map(|h| h.score).collect(),
        deduped: deduped.iter().map(|(e, _)| e.entry_id.clone()).collect(),
        references: references.iter().map(|&i| indexes.entries[i].entry_id.clone()).collect(),
        entries,
    })
}
