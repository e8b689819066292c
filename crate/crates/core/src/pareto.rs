//! Pareto dominance, non-dominated sorting with crowding distance, survivor
//! selection, and exact hypervolume.
//!
//! Every routine works on oriented score vectors, where larger is better in
//! every objective.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Candidate, CandidateId, Population, ScoreVector};

/// Crowding distance assigned to boundary points of a front.
pub const CROWDING_BOUNDARY: f64 = f64::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParetoError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("point {index} lies below the reference point in objective {objective}")]
    BelowReference { index: usize, objective: usize },
    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),
    #[error("hypervolume needs at least one objective")]
    NoObjectives,
}

/// True iff `a` is at least as good as `b` everywhere and strictly better
/// somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool, ParetoError> {
    if a.len() != b.len() {
        return Err(ParetoError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(dominates_unchecked(a, b))
}

pub fn dominates_scores(a: &ScoreVector, b: &ScoreVector) -> Result<bool, ParetoError> {
    dominates(&a.oriented, &b.oriented)
}

fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strictly = true;
        }
    }
    strictly
}

/// Fast non-dominated sort. Returns fronts of point indices; rank 0 is the
/// non-dominated set. Indices inside a front keep input order.
pub fn nondominated_ranks(points: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by_count = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates_unchecked(&points[i], &points[j]) {
                dominates_list[i].push(j);
                dominated_by_count[j] += 1;
            } else if dominates_unchecked(&points[j], &points[i]) {
                dominates_list[j].push(i);
                dominated_by_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by_count[j] -= 1;
                if dominated_by_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    fronts
}

/// Crowding distance of each member of `front` (indices into `points`),
/// returned in the order of `front`.
pub fn crowding_distances(points: &[Vec<f64>], front: &[usize]) -> Vec<f64> {
    let len = front.len();
    if len <= 2 {
        return vec![CROWDING_BOUNDARY; len];
    }
    let k = points[front[0]].len();
    let mut dist = vec![0.0f64; len];
    let mut order: Vec<usize> = (0..len).collect();
    #[allow(clippy::needless_range_loop)]
    for m in 0..k {
        order.sort_by(|&a, &b| {
            points[front[a]][m].total_cmp(&points[front[b]][m]).then(front[a].cmp(&front[b]))
        });
        let lo = points[front[order[0]]][m];
        let hi = points[front[order[len - 1]]][m];
        dist[order[0]] = CROWDING_BOUNDARY;
        dist[order[len - 1]] = CROWDING_BOUNDARY;
        let span = hi - lo;
        if span <= 0.0 {
            continue;
        }
        for w in 1..len - 1 {
            let slot = order[w];
            if dist[slot] == CROWDING_BOUNDARY {
                continue;
            }
            let gap = points[front[order[w + 1]]][m] - points[front[order[w - 1]]][m];
            dist[slot] = (dist[slot] + gap / span).min(CROWDING_BOUNDARY);
        }
    }
    dist
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub ranks: Vec<Vec<CandidateId>>,
    pub crowding: BTreeMap<CandidateId, f64>,
}

impl ParetoFront {
    pub fn rank_of(&self) -> BTreeMap<CandidateId, usize> {
        self.ranks
            .iter()
            .enumerate()
            .flat_map(|(r, ids)| ids.iter().map(move |id| (*id, r)))
            .collect()
    }
}

pub fn nondominated_sort(pop: &[Candidate]) -> ParetoFront {
    let points: Vec<Vec<f64>> = pop.iter().map(|c| c.scores.oriented.clone()).collect();
    let fronts = nondominated_ranks(&points);
    let mut front = ParetoFront::default();
    for idxs in &fronts {
        let dist = crowding_distances(&points, idxs);
        for (&i, d) in idxs.iter().zip(dist) {
            front.crowding.insert(pop[i].id, d);
        }
        front.ranks.push(idxs.iter().map(|&i| pop[i].id).collect());
    }
    front
}

/// Environmental selection: whole ranks are admitted from rank 0 upward; the
/// rank that overflows is truncated by descending crowding distance, ties
/// broken by ascending id.
pub fn select_survivors(pop: Vec<Candidate>, capacity: usize, generation: u32) -> Population {
    let points: Vec<Vec<f64>> = pop.iter().map(|c| c.scores.oriented.clone()).collect();
    let mut keep: Vec<usize> = Vec::with_capacity(capacity.min(pop.len()));
    for front in nondominated_ranks(&points) {
        if keep.len() == capacity {
            break;
        }
        if keep.len() + front.len() <= capacity {
            keep.extend(front);
            continue;
        }
        let dist = crowding_distances(&points, &front);
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&a, &b| {
            dist[b].total_cmp(&dist[a]).then(pop[front[a]].id.cmp(&pop[front[b]].id))
        });
        let room = capacity - keep.len();
        keep.extend(order.into_iter().take(room).map(|o| front[o]));
    }
    keep.sort_unstable();
    let mut slots: Vec<Option<Candidate>> = pop.into_iter().map(Some).collect();
    let members = keep.into_iter().filter_map(|i| slots[i].take()).collect();
    Population::new(members, capacity, generation).expect("survivor selection respects capacity and id uniqueness")
}

/// Keeps the mutually non-dominated members, dropping exact score duplicates
/// after their first occurrence.
pub fn nondominated_filter(candidates: Vec<Candidate>) -> Vec<Candidate> {
    let points: Vec<&[f64]> = candidates.iter().map(|c| c.scores.oriented.as_slice()).collect();
    let keep: Vec<bool> = (0..points.len())
        .map(|i| {
            !(0..points.len()).any(|j| {
                j != i && (dominates_unchecked(points[j], points[i]) || (j < i && points[j] == points[i]))
            })
        })
        .collect();
    candidates.into_iter().zip(keep).filter_map(|(c, k)| k.then_some(c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypervolumeResult {
    pub value: f64,
    pub reference_point: Vec<f64>,
    pub point_count: usize,
}

/// Exact hypervolume dominated by `points` relative to `reference`
/// (maximization). Uses WFG-style exclusive-volume recursion with slicing on
/// the last objective and a sweep for two objectives.
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64]) -> Result<HypervolumeResult, ParetoError> {
    let k = reference.len();
    if k == 0 {
        return Err(ParetoError::NoObjectives);
    }
    for (index, p) in points.iter().enumerate() {
        if p.len() != k {
            return Err(ParetoError::DimensionMismatch(p.len(), k));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(ParetoError::NonFinite(index));
        }
        if let Some(objective) = p.iter().zip(reference).position(|(x, r)| x < r) {
            return Err(ParetoError::BelowReference { index, objective });
        }
    }
    let front = nondominated_unique(points.to_vec());
    Ok(HypervolumeResult {
        value: wfg(front, reference),
        reference_point: reference.to_vec(),
        point_count: points.len(),
    })
}

fn nondominated_unique(mut points: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    points.sort_by(|a, b| lex_desc(a, b));
    points.dedup();
    let mut front: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    // Lexicographically descending order: a point can only be dominated by
    // one that precedes it.
    for p in points {
        if !front.iter().any(|q| dominates_unchecked(q, &p)) {
            front.push(p);
        }
    }
    front
}

fn lex_desc(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match y.total_cmp(x) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn box_volume(p: &[f64], reference: &[f64]) -> f64 {
    p.iter().zip(reference).map(|(x, r)| x - r).product()
}

/// `front` must be mutually non-dominated and free of duplicates.
fn wfg(mut front: Vec<Vec<f64>>, reference: &[f64]) -> f64 {
    let k = reference.len();
    match (front.len(), k) {
        (0, _) => 0.0,
        (1, _) => box_volume(&front[0], reference),
        (_, 1) => front.iter().map(|p| p[0]).fold(f64::MIN, f64::max) - reference[0],
        (_, 2) => sweep_2d(front, reference),
        _ => {
            let last = k - 1;
            // Ascending in the last objective: every later point reaches at
            // least as far, so limiting them by point i pins their last
            // coordinate to p_i[last] and the exclusive volume factors.
            front.sort_by(|a, b| a[last].total_cmp(&b[last]).then_with(|| lex_desc(a, b)));
            let sub_ref = &reference[..last];
            let mut total = 0.0;
            for i in 0..front.len() {
                let p = &front[i];
                let height = p[last] - reference[last];
                if height <= 0.0 {
                    continue;
                }
                let limited: Vec<Vec<f64>> = front[i + 1..]
                    .iter()
                    .map(|q| q[..last].iter().zip(&p[..last]).map(|(a, b)| a.min(*b)).collect())
                    .collect();
                let dominated = wfg(nondominated_unique(limited), sub_ref);
                total += height * (box_volume(&p[..last], sub_ref) - dominated);
            }
            total
        }
    }
}

fn sweep_2d(mut front: Vec<Vec<f64>>, reference: &[f64]) -> f64 {
    front.sort_by(|a, b| b[0].total_cmp(&a[0]).then(b[1].total_cmp(&a[1])));
    let mut area = 0.0;
    let mut reached = reference[1];
    for p in &front {
        if p[1] > reached {
            area += (p[0] - reference[0]) * (p[1] - reached);
            reached = p[1];
        }
    }
    area
}
