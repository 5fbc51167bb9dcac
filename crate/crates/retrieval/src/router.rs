//! Lexical router assigning each problem to exactly one retrieval route.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::tokenize::math_tokenize;
use crate::{Result, RetrievalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Combinatorics,
    Geometry,
    NumberTheory,
    Default,
}

impl Route {
    pub const ALL: [Route; 4] = [
        Route::Combinatorics,
        Route::Geometry,
        Route::NumberTheory,
        Route::Default,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Route::Combinatorics => "combinatorics",
            Route::Geometry => "geometry",
            Route::NumberTheory => "number_theory",
            Route::Default => "default",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Route {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Route::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown route {s:?}"))
    }
}

/// A keyword list: plain lines match as token prefixes (multi-word lines as
/// consecutive tokens), `/regex/` lines match the raw text. `#` starts a
/// comment line.
#[derive(Debug, Clone, Default)]
pub struct KeywordSet {
    phrases: Vec<Vec<String>>,
    patterns: Vec<Regex>,
}

impl KeywordSet {
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = KeywordSet::default();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.len() > 2 && line.starts_with('/') && line.ends_with('/') {
                let pattern = &line[1..line.len() - 1];
                let re = Regex::new(pattern).map_err(|source| RetrievalError::Pattern {
                    pattern: pattern.to_string(),
                    source,
                })?;
                set.patterns.push(re);
            } else {
                let phrase = math_tokenize(line);
                if !phrase.is_empty() {
                    set.phrases.push(phrase);
                }
            }
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty() && self.patterns.is_empty()
    }

    /// True if any keyword occurs in `tokens` or any pattern matches `raw`.
    pub fn matches(&self, tokens: &[String], raw: &str) -> bool {
        let phrase_hit = self.phrases.iter().any(|phrase| {
            tokens.windows(phrase.len()).any(|window| {
                window
                    .iter()
                    .zip(phrase)
                    .all(|(token, kw)| token.starts_with(kw.as_str()))
            })
        });
        phrase_hit || self.patterns.iter().any(|re| re.is_match(raw))
    }

    pub fn matches_text(&self, text: &str) -> bool {
        self.matches(&math_tokenize(text), text)
    }
}

/// Gates are checked in the fixed priority geometry → combinatorics →
/// number theory; the default route fires when none does.
#[derive(Debug, Clone)]
pub struct Router {
    geometry: KeywordSet,
    combinatorics: KeywordSet,
    number_theory: KeywordSet,
}

const GEOMETRY_GATE: &str = include_str!("../data/gates/geometry.txt");
const COMBINATORICS_GATE: &str = include_str!("../data/gates/combinatorics.txt");
const NUMBER_THEORY_GATE: &str = include_str!("../data/gates/number_theory.txt");

impl Default for Router {
    fn default() -> Self {
        Self {
            geometry: KeywordSet::parse(GEOMETRY_GATE).expect("shipped geometry gate parses"),
            combinatorics: KeywordSet::parse(COMBINATORICS_GATE).expect("shipped combinatorics gate parses"),
            number_theory: KeywordSet::parse(NUMBER_THEORY_GATE).expect("shipped number theory gate parses"),
        }
    }
}

impl Router {
    pub fn new(geometry: KeywordSet, combinatorics: KeywordSet, number_theory: KeywordSet) -> Self {
        Self {
            geometry,
            combinatorics,
            number_theory,
        }
    }

    /// Load `geometry.txt`, `combinatorics.txt` and `number_theory.txt` from
    /// `dir`, falling back to the shipped list for any file that is absent.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let load = |name: &str, fallback: &str| {
            let path = dir.join(name);
            if path.exists() {
                KeywordSet::load(&path)
            } else {
                KeywordSet::parse(fallback)
            }
        };
        Ok(Self {
            geometry: load("geometry.txt", GEOMETRY_GATE)?,
            combinatorics: load("combinatorics.txt", COMBINATORICS_GATE)?,
            number_theory: load("number_theory.txt", NUMBER_THEORY_GATE)?,
        })
    }

    pub fn route_query(&self, problem: &str) -> Route {
        let tokens = math_tokenize(problem);
        if self.geometry.matches(&tokens, problem) {
            Route::Geometry
        } else if self.combinatorics.matches(&tokens, problem) {
            Route::Combinatorics
        } else if self.number_theory.matches(&tokens, problem) {
            Route::NumberTheory
        } else {
            Route::Default
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shipped_gates_route_examples() {
        let router = Router::default();
        assert_eq!(
            router.route_query("In triangle ABC, the circumcircle meets the bisector at D."),
            Route::Geometry
        );
        assert_eq!(router.route_query("Find all primes p dividing 2^p + 1."), Route::NumberTheory);
        assert_eq!(router.route_query("Evaluate the integral of x^{2} from 0 to 1."), Route::Default);
        assert_eq!(
            router.route_query("How many subsets of {1,...,10} contain no two consecutive integers?"),
            Route::Combinatorics
        );
    }

    #[test]
    fn geometry_has_priority_over_other_gates() {
        let router = Router::default();
        // both a geometry and a number-theory cue
        assert_eq!(router.route_query("A circle has integer radius r with r prime."), Route::Geometry);
        // combinatorics beats number theory
        assert_eq!(router.route_query("Color the primes red; how many colorings?"), Route::Combinatorics);
    }

    #[test]
    fn regex_features_fire_without_keywords() {
        let router = Router::default();
        assert_eq!(router.route_query(r"Compute $\overline{AB}$ given the data."), Route::Geometry);
    }

    #[test]
    fn multi_word_keywords_need_consecutive_tokens() {
        let set = KeywordSet::parse("integer solutions").unwrap();
        assert!(set.matches_text("Find all integer solutions to x^2 = y^3"));
        assert!(!set.matches_text("integer values; the solutions are"));
    }

    #[test]
    fn gate_files_override_shipped_lists() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("number_theory.txt"), "integral\n").unwrap();
        let router = Router::from_dir(dir.path()).unwrap();
        assert_eq!(router.route_query("Evaluate the integral"), Route::NumberTheory);
        // unchanged gates still come from the shipped lists
        assert_eq!(router.route_query("a triangle"), Route::Geometry);
    }

    #[test]
    fn bad_pattern_is_reported() {
        assert!(matches!(KeywordSet::parse("/(unclosed/"), Err(RetrievalError::Pattern { .. })));
    }

    proptest! {
        #[test]
        fn routing_is_total_and_deterministic(text in "\\PC{0,80}") {
            let router = Router::default();
            let first = router.route_query(&text);
            prop_assert_eq!(first, router.route_query(&text));
            prop_assert!(Route::ALL.contains(&first));
        }
    }
}
