//! Domain types shared across the engine: genotypes, objective specs, score
//! vectors, candidates and populations, plus score orientation and
//! normalization.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid score for objective `{objective}`: {value}")]
    InvalidScore { objective: String, value: f64 },
    #[error("objective `{0}` has an empty or inverted raw range")]
    BadRange(String),
    #[error("duplicate objective name `{0}`")]
    DuplicateObjective(String),
    #[error("score vector has {got} entries, registry has {expected}")]
    Arity { expected: usize, got: usize },
    #[error("genotype text must be a non-empty single line")]
    BadGenotype,
    #[error("population over capacity ({len} > {capacity})")]
    OverCapacity { len: usize, capacity: usize },
    #[error("duplicate candidate id {0}")]
    DuplicateCandidate(CandidateId),
}

/// Multi-character tokens recognised by [`tokenize`]. Everything else is a
/// single-character token; bracketed atoms are not special-cased.
const MULTI_CHAR_TOKENS: [&str; 2] = ["Cl", "Br"];

/// Splits genotype text into tokens: `Cl` and `Br` are single tokens, every
/// other character is its own token.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::with_capacity(text.len());
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(tok) = MULTI_CHAR_TOKENS.iter().find(|t| rest.starts_with(**t)) {
            out.push(&rest[..tok.len()]);
            rest = &rest[tok.len()..];
            continue;
        }
        let width = rest.chars().next().map(char::len_utf8).unwrap_or(1);
        out.push(&rest[..width]);
        rest = &rest[width..];
    }
    out
}

/// One-line candidate encoding (SMILES or a synthetic token string).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Genotype {
    text: String,
    token_count: usize,
}

impl Genotype {
    pub fn new(text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        if text.is_empty() || text.contains(['\n', '\r']) {
            return Err(DomainError::BadGenotype);
        }
        let token_count = tokenize(&text).len();
        Ok(Self { text, token_count })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// Verb used in prompt directives.
    pub fn verb(self) -> &'static str {
        match self {
            Direction::Maximize => "increase",
            Direction::Minimize => "decrease",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub name: String,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_range: Option<(f64, f64)>,
}

impl ObjectiveSpec {
    pub fn new(name: impl Into<String>, direction: Direction, raw_range: Option<(f64, f64)>) -> Self {
        Self { name: name.into(), direction, raw_range }
    }

    pub fn check(&self) -> Result<(), DomainError> {
        match self.raw_range {
            Some((lo, hi)) if !(lo.is_finite() && hi.is_finite() && lo < hi) => {
                Err(DomainError::BadRange(self.name.clone()))
            }
            _ => Ok(()),
        }
    }
}

/// Checks that objective names are unique and every range is well formed.
pub fn validate_registry(specs: &[ObjectiveSpec]) -> Result<(), DomainError> {
    let mut seen = BTreeSet::new();
    for spec in specs {
        spec.check()?;
        if !seen.insert(spec.name.as_str()) {
            return Err(DomainError::DuplicateObjective(spec.name.clone()));
        }
    }
    Ok(())
}

/// Maps a raw objective value into `[0, 1]` with larger meaning better.
///
/// With a raw range the value is clamped into it first. Without one the raw
/// value must already lie in `[0, 1]`.
pub fn orient_score(spec: &ObjectiveSpec, raw: f64) -> Result<f64, DomainError> {
    let invalid = || DomainError::InvalidScore { objective: spec.name.clone(), value: raw };
    if !raw.is_finite() {
        return Err(invalid());
    }
    let (lo, hi) = match spec.raw_range {
        Some((lo, hi)) => {
            spec.check()?;
            (lo, hi)
        }
        None => {
            if !(0.0..=1.0).contains(&raw) {
                return Err(invalid());
            }
            (0.0, 1.0)
        }
    };
    let x = raw.clamp(lo, hi);
    let oriented = match spec.direction {
        Direction::Maximize => (x - lo) / (hi - lo),
        Direction::Minimize => (hi - x) / (hi - lo),
    };
    Ok(oriented.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub raw: Vec<f64>,
    pub oriented: Vec<f64>,
    pub scalar_fitness: f64,
}

impl ScoreVector {
    /// Orients every raw entry against the registry.
    pub fn from_raw(specs: &[ObjectiveSpec], raw: Vec<f64>) -> Result<Self, DomainError> {
        if raw.len() != specs.len() {
            return Err(DomainError::Arity { expected: specs.len(), got: raw.len() });
        }
        let oriented = specs
            .iter()
            .zip(&raw)
            .map(|(spec, &r)| orient_score(spec, r))
            .collect::<Result<Vec<_>, _>>()?;
        let scalar_fitness = scalarize(&oriented);
        Ok(Self { raw, oriented, scalar_fitness })
    }

    /// Score carried by invalid candidates.
    pub fn sentinel(k: usize) -> Self {
        Self { raw: vec![0.0; k], oriented: vec![0.0; k], scalar_fitness: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.oriented.len()
    }

    pub fn is_empty(&self) -> bool {
        self.oriented.is_empty()
    }
}

/// Unweighted sum of oriented entries; lies in `[0, K]`.
pub fn scalarize(oriented: &[f64]) -> f64 {
    oriented.iter().sum()
}

/// Relative threshold under which a population standard deviation is treated
/// as zero.
const ZERO_SIGMA_REL: f64 = 1e-12;

/// z-normalizes raw scores of objective `k` over the given population:
/// `(s - mean) / std` with the population (1/n) standard deviation. A
/// degenerate population (std of zero) maps every entry to 0.
pub fn znormalize(population: &[ScoreVector], k: usize) -> Vec<f64> {
    let values: Vec<f64> = population.iter().map(|s| s.raw[k]).collect();
    znormalize_values(&values)
}

pub fn znormalize_values(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma <= ZERO_SIGMA_REL * mean.abs().max(1.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sigma).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateId(pub u64);

impl fmt::Display for CandidateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: CandidateId,
    pub genotype: Genotype,
    pub scores: ScoreVector,
    pub valid: bool,
    pub proposer_id: String,
    pub parent_ids: Vec<CandidateId>,
    pub generation: u32,
}

impl Candidate {
    pub fn fitness(&self) -> f64 {
        self.scores.scalar_fitness
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    members: Vec<Candidate>,
    capacity: usize,
    pub generation: u32,
}

impl Population {
    pub fn new(members: Vec<Candidate>, capacity: usize, generation: u32) -> Result<Self, DomainError> {
        if members.len() > capacity {
            return Err(DomainError::OverCapacity { len: members.len(), capacity });
        }
        let mut ids = BTreeSet::new();
        for m in &members {
            if !ids.insert(m.id) {
                return Err(DomainError::DuplicateCandidate(m.id));
            }
        }
        Ok(Self { members, capacity, generation })
    }

    pub fn members(&self) -> &[Candidate] {
        &self.members
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains_text(&self, text: &str) -> bool {
        self.members.iter().any(|m| m.genotype.text() == text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(dir: Direction, range: Option<(f64, f64)>) -> ObjectiveSpec {
        ObjectiveSpec::new("x", dir, range)
    }

    #[test]
    fn orient_examples() {
        assert_eq!(orient_score(&spec(Direction::Maximize, Some((0.0, 1.0))), 1.0).unwrap(), 1.0);
        assert_eq!(orient_score(&spec(Direction::Minimize, Some((1.0, 10.0))), 1.0).unwrap(), 1.0);
        let mid = orient_score(&spec(Direction::Minimize, Some((1.0, 10.0))), 5.5).unwrap();
        assert!((mid - 0.5).abs() < 1e-15);
    }

    #[test]
    fn orient_clamps_and_rejects() {
        let s = spec(Direction::Maximize, Some((0.0, 2.0)));
        assert_eq!(orient_score(&s, 5.0).unwrap(), 1.0);
        assert_eq!(orient_score(&s, -1.0).unwrap(), 0.0);
        assert!(matches!(orient_score(&s, f64::NAN), Err(DomainError::InvalidScore { .. })));
        assert!(orient_score(&s, f64::INFINITY).is_err());
        let unbounded = spec(Direction::Minimize, None);
        assert_eq!(orient_score(&unbounded, 0.25).unwrap(), 0.75);
        assert!(orient_score(&unbounded, 1.5).is_err());
    }

    #[test]
    fn registry_rules() {
        let a = ObjectiveSpec::new("a", Direction::Maximize, None);
        assert!(validate_registry(&[a.clone(), a.clone()]).is_err());
        let bad = ObjectiveSpec::new("b", Direction::Maximize, Some((1.0, 1.0)));
        assert!(validate_registry(&[a, bad]).is_err());
    }

    #[test]
    fn znormalize_examples() {
        let sv = |x: f64| ScoreVector { raw: vec![x], oriented: vec![0.0], scalar_fitness: 0.0 };
        assert_eq!(znormalize(&[sv(2.0), sv(2.0), sv(2.0)], 0), vec![0.0; 3]);
        assert_eq!(znormalize(&[sv(0.0), sv(2.0)], 0), vec![-1.0, 1.0]);
        let out = znormalize_values(&[1.0, 2.0, 3.0]);
        let mean = out.iter().sum::<f64>() / 3.0;
        let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
        assert_eq!(znormalize_values(&[0.1; 7]), vec![0.0; 7]);
    }

    #[test]
    fn scalarize_examples() {
        assert_eq!(scalarize(&[1.0; 5]), 5.0);
        assert_eq!(scalarize(&[0.0; 5]), 0.0);
        assert!((scalarize(&[0.9, 0.8, 0.9, 0.85, 0.9]) - 4.35).abs() < 1e-12);
    }

    #[test]
    fn genotype_rules() {
        assert!(Genotype::new("").is_err());
        assert!(Genotype::new("C\nC").is_err());
        let g = Genotype::new("CCl(Br)O").unwrap();
        assert_eq!(g.token_count(), 6);
        assert_eq!(tokenize("ClBr"), vec!["Cl", "Br"]);
    }

    #[test]
    fn population_rules() {
        let c = Candidate {
            id: CandidateId(1),
            genotype: Genotype::new("C").unwrap(),
            scores: ScoreVector::sentinel(2),
            valid: true,
            proposer_id: "p".into(),
            parent_ids: vec![],
            generation: 0,
        };
        assert!(Population::new(vec![c.clone(), c.clone()], 5, 0).is_err());
        assert!(Population::new(vec![c.clone()], 0, 0).is_err());
        assert_eq!(Population::new(vec![c], 1, 0).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn orient_is_monotone(lo in -50.0f64..50.0, width in 0.1f64..100.0, a in -200.0f64..200.0, b in -200.0f64..200.0) {
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            let max = spec(Direction::Maximize, Some((lo, lo + width)));
            let min = spec(Direction::Minimize, Some((lo, lo + width)));
            prop_assert!(orient_score(&max, x).unwrap() <= orient_score(&max, y).unwrap());
            prop_assert!(orient_score(&min, x).unwrap() >= orient_score(&min, y).unwrap());
        }

        #[test]
        fn znormalize_identity(values in proptest::collection::vec(-1e3f64..1e3, 2..60)) {
            let out = znormalize_values(&values);
            let n = out.len() as f64;
            let mean = out.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            if out.iter().any(|v| *v != 0.0) {
                let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn scalarize_permutation_invariant(mut v in proptest::collection::vec(0.0f64..1.0, 1..8), seed in any::<u64>()) {
            let before = scalarize(&v);
            let n = v.len();
            v.rotate_left((seed as usize) % n);
            prop_assert!((scalarize(&v) - before).abs() < 1e-12);
        }
    }
}
