//! Named metric vectors, Pareto dominance and best-so-far bookkeeping.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// Maps a value so that larger is always better.
    fn orient(self, v: f64) -> f64 {
        match self {
            Direction::Maximize => v,
            Direction::Minimize => -v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub name: String,
    pub direction: Direction,
}

impl ObjectiveSpec {
    pub fn maximize(name: &str) -> Self {
        Self { name: name.to_string(), direction: Direction::Maximize }
    }

    pub fn minimize(name: &str) -> Self {
        Self { name: name.to_string(), direction: Direction::Minimize }
    }
}

/// The accuracy/context pair every run optimizes unless configured otherwise.
pub fn default_objectives() -> Vec<ObjectiveSpec> {
    vec![ObjectiveSpec::maximize("accuracy"), ObjectiveSpec::minimize("ctx_tokens")]
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric vector does not match objectives: {0}")]
    ObjectiveMismatch(String),
    #[error("metric {0:?} is not finite")]
    NonFinite(String),
    #[error("best-so-far series of an empty sequence")]
    EmptySeries,
    #[error("duplicate objective {0:?}")]
    DuplicateObjective(String),
}

/// Objective name → finite value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricVector(BTreeMap<String, f64>);

impl MetricVector {
    pub fn new<I, S>(values: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (name, value) in values {
            let name = name.into();
            if !value.is_finite() {
                return Err(MetricsError::NonFinite(name));
            }
            map.insert(name, value);
        }
        Ok(Self(map))
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The sub-vector holding exactly `objectives`.
    pub fn project(&self, objectives: &[ObjectiveSpec]) -> Result<MetricVector, MetricsError> {
        let mut map = BTreeMap::new();
        for obj in objectives {
            let v = self
                .get(&obj.name)
                .ok_or_else(|| MetricsError::ObjectiveMismatch(format!("missing {:?}", obj.name)))?;
            map.insert(obj.name.clone(), v);
        }
        Ok(MetricVector(map))
    }

    /// Values oriented so larger is better, in objective order. The vector
    /// must hold exactly the objective names.
    fn oriented(&self, objectives: &[ObjectiveSpec]) -> Result<Vec<f64>, MetricsError> {
        if self.0.len() != objectives.len() {
            return Err(MetricsError::ObjectiveMismatch(format!(
                "{} values for {} objectives",
                self.0.len(),
                objectives.len()
            )));
        }
        objectives
            .iter()
            .map(|o| {
                self.get(&o.name)
                    .map(|v| o.direction.orient(v))
                    .ok_or_else(|| MetricsError::ObjectiveMismatch(format!("missing {:?}", o.name)))
            })
            .collect()
    }
}

pub fn check_objectives(objectives: &[ObjectiveSpec]) -> Result<(), MetricsError> {
    let mut seen = std::collections::BTreeSet::new();
    for o in objectives {
        if !seen.insert(o.name.as_str()) {
            return Err(MetricsError::DuplicateObjective(o.name.clone()));
        }
    }
    Ok(())
}

fn dominates_oriented(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strict = true;
        }
    }
    strict
}

pub fn dominates(a: &MetricVector, b: &MetricVector, objectives: &[ObjectiveSpec]) -> Result<bool, MetricsError> {
    Ok(dominates_oriented(&a.oriented(objectives)?, &b.oriented(objectives)?))
}

/// Indices of the non-dominated rows of `oriented` (larger is better in
/// every column), in input order.
///
/// Rows are visited in lexicographically decreasing order; a row can only be
/// dominated by one visited earlier, and anything dominating it is in turn
/// dominated by (or equal to) a frontier member, so each row is checked
/// against the frontier found so far.
fn frontier_indices(oriented: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..oriented.len()).collect();
    order.sort_by(|&i, &j| {
        oriented[j]
            .iter()
            .zip(&oriented[i])
            .map(|(a, b)| a.partial_cmp(b).unwrap_or(Ordering::Equal))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| dominates_oriented(&oriented[f], &oriented[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

/// Non-dominated points, ordered by the first objective (best first), then
/// by id. Points with identical vectors are all kept.
pub fn pareto_frontier<Id>(
    points: &[(Id, MetricVector)],
    objectives: &[ObjectiveSpec],
) -> Result<Vec<(Id, MetricVector)>, MetricsError>
where
    Id: Clone + Ord,
{
    let oriented: Vec<Vec<f64>> = points
        .iter()
        .map(|(_, v)| v.oriented(objectives))
        .collect::<Result<_, _>>()?;
    let mut front: Vec<usize> = frontier_indices(&oriented);
    front.sort_by(|&i, &j| {
        let first = |k: usize| oriented[k].first().copied().unwrap_or(0.0);
        first(j)
            .partial_cmp(&first(i))
            .unwrap_or(Ordering::Equal)
            .then_with(|| points[i].0.cmp(&points[j].0))
    });
    Ok(front.into_iter().map(|i| points[i].clone()).collect())
}

/// Running optimum of each prefix.
pub fn best_so_far_series(scores: &[f64], direction: Direction) -> Result<Vec<f64>, MetricsError> {
    let (&first, rest) = scores.split_first().ok_or(MetricsError::EmptySeries)?;
    let mut best = first;
    let mut out = Vec::with_capacity(scores.len());
    out.push(best);
    for &s in rest {
        if direction.orient(s) > direction.orient(best) {
            best = s;
        }
        out.push(best);
    }
    Ok(out)
}

/// Candidates ordered best first on `primary`, ties broken by `tie_break`,
/// then by id. Candidates lacking either objective are left out.
pub fn rank<'a, Id: Ord>(
    candidates: &'a [(Id, MetricVector)],
    primary: &ObjectiveSpec,
    tie_break: Option<&ObjectiveSpec>,
) -> Vec<&'a Id> {
    let key = |v: &MetricVector| -> Option<(f64, f64)> {
        let p = primary.direction.orient(v.get(&primary.name)?);
        let t = match tie_break {
            Some(t) => t.direction.orient(v.get(&t.name)?),
            None => 0.0,
        };
        Some((p, t))
    };
    let mut keyed: Vec<(&Id, (f64, f64))> = candidates.iter().filter_map(|(id, v)| key(v).map(|k| (id, k))).collect();
    keyed.sort_by(|(ia, (pa, ta)), (ib, (pb, tb))| {
        pb.partial_cmp(pa)
            .unwrap_or(Ordering::Equal)
            .then_with(|| tb.partial_cmp(ta).unwrap_or(Ordering::Equal))
            .then_with(|| ia.cmp(ib))
    });
    keyed.into_iter().map(|(id, _)| id).collect()
}

/// First of [`rank`].
pub fn select_best<'a, Id: Ord>(
    candidates: &'a [(Id, MetricVector)],
    primary: &ObjectiveSpec,
    tie_break: Option<&ObjectiveSpec>,
) -> Option<&'a Id> {
    rank(candidates, primary, tie_break).into_iter().next()
}
