use std::path::PathBuf;

use mh_retrieval::{
    adaptive_k, jaccard, load_corpus, route_retrieve, CorpusIndexes, Route, RoutePolicies,
};

fn fixture() -> CorpusIndexes {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/fixture_corpus.jsonl");
    let corpus = load_corpus(&path).unwrap();
    assert_eq!(corpus.len(), 50);
    CorpusIndexes::build(corpus, RoutePolicies::default()).unwrap()
}

#[test]
fn combinatorics_route_dedups_then_keeps_three() {
    let idx = fixture();
    let out = route_retrieve(
        "In how many ways can we choose a subset of 9 balls so that no two chosen balls are adjacent?",
        &idx,
    )
    .unwrap();
    assert_eq!(out.route, Route::Combinatorics);
    assert_eq!(out.fetched.len(), 20);
    assert!(out.deduped.len() <= 8);
    assert!(out.entries.len() <= 3 && !out.entries.is_empty());
    for e in &out.entries {
        assert!(out.fetched.contains(&e.entry_id));
    }
    for (i, a) in out.entries.iter().enumerate() {
        for b in &out.entries[i + 1..] {
            assert!(jaccard(&a.problem, &b.problem) < 0.8);
        }
    }
}

#[test]
fn near_duplicates_never_survive_dedup() {
    let idx = fixture();
    let out = route_retrieve(
        "In how many different ways can we choose a subset of 5 balls so that no two chosen balls are adjacent in the arrangement?",
        &idx,
    )
    .unwrap();
    // comb-00 and comb-dup-0 differ by one word
    let both = out.deduped.iter().filter(|id| *id == "comb-00" || *id == "comb-dup-0").count();
    assert_eq!(both, 1);
}

#[test]
fn geometry_route_returns_reference_plus_two() {
    let idx = fixture();
    let out = route_retrieve("In triangle ABC, the incircle touches AB at F. Find angle AFC.", &idx).unwrap();
    assert_eq!(out.route, Route::Geometry);
    assert_eq!(out.entries.len(), 3);
    assert!(idx.is_hard_reference(&out.entries[0].entry_id));
    assert!(out.entries[0].difficulty.unwrap() > 6.0);
}

#[test]
fn number_theory_route_fetches_twelve() {
    let idx = fixture();
    let out = route_retrieve("Find all primes p such that p^{2} + 8 is prime.", &idx).unwrap();
    assert_eq!(out.route, Route::NumberTheory);
    assert_eq!(out.fetched.len(), 12);
    assert_eq!(out.entries.len(), 3);
}

#[test]
fn default_route_uses_adaptive_k() {
    let idx = fixture();
    // top BM25 score 36.5 against a top-3 mean of 19.5: concentrated
    let concentrated =
        route_retrieve("Compute the limit of (1 + 1/n)^{n} as n tends to infinity.", &idx).unwrap();
    assert_eq!(concentrated.route, Route::Default);
    assert_eq!(concentrated.fetched[0], "alg-05");
    assert!((concentrated.fetched_scores[0] - 36.517044973293196).abs() < 1e-9);
    assert_eq!(concentrated.entries.len(), 2);

    // 15.1 against a mean of 11.1: spread out
    let spread = route_retrieve("Evaluate the sum of the series 1/k^{2}.", &idx).unwrap();
    assert_eq!(spread.route, Route::Default);
    assert_eq!(spread.entries.len(), 3);
    assert_eq!(spread.entries.len(), adaptive_k(&spread.fetched_scores, 2, 3));
}

#[test]
fn returned_solutions_respect_prompt_budget() {
    let idx = fixture();
    let out = route_retrieve("Choose a subset of 12 tiles with a long case analysis of the arrangement.", &idx).unwrap();
    assert!(out.entries.iter().any(|e| e.entry_id == "comb-long"));
    for query in [
        "Choose a subset of 12 tiles with a long case analysis of the arrangement.",
        "Two circles intersect at P and Q.",
        "Show that n^{5} - n is divisible by 30.",
        "Find the minimum of x + 1/x.",
    ] {
        let out = route_retrieve(query, &idx).unwrap();
        let bound = idx.policies().for_route(out.route).max_results();
        assert!(out.entries.len() <= bound);
        assert!(out.entries.iter().all(|e| e.solution.chars().count() <= 3_000));
    }
}
