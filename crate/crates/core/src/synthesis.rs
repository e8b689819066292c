//! Similarity-based preference-pair construction.
//!
//! Three phases: similarity statistics over the whole history, a score
//! stratification of the recent window, then a per-prompt search for a
//! chosen and a rejected candidate that walks the nested similarity
//! intervals from strict to relaxed before falling back to the half pools.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::CandidateId;
use crate::memory::{recent_prompts, CandidateEntry, TrajectoryRecord};
use crate::proposers::render_molecules;
use crate::similarity::{compute_stats, SimilarityError, SimilarityStats};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("stratification needs at least 2 scored candidates, got {0}")]
    InsufficientCandidates(usize),
    #[error("alpha must lie in (0, 0.5], got {0}")]
    BadAlpha(f64),
    #[error("pairs per prompt must be at least 1")]
    BadPairsPerPrompt,
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceStage {
    I1,
    I2,
    I3,
    Half,
}

impl SourceStage {
    pub const ALL: [SourceStage; 4] = [SourceStage::I1, SourceStage::I2, SourceStage::I3, SourceStage::Half];

    /// Index into `SimilarityStats::intervals`, `None` for the half fallback.
    pub fn interval_index(self) -> Option<usize> {
        match self {
            SourceStage::I1 => Some(0),
            SourceStage::I2 => Some(1),
            SourceStage::I3 => Some(2),
            SourceStage::Half => None,
        }
    }
}

impl fmt::Display for SourceStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedPools {
    pub high: BTreeSet<CandidateId>,
    pub low: BTreeSet<CandidateId>,
    pub top_half: BTreeSet<CandidateId>,
    pub bottom_half: BTreeSet<CandidateId>,
    pub alpha: f64,
    pub universe: usize,
}

/// Guards `ceil` against products like `0.3 * 10 = 3.0000000000000004`.
const CEIL_SLACK: f64 = 1e-9;

fn ceil_count(x: f64) -> usize {
    (x - CEIL_SLACK).ceil().max(0.0) as usize
}

pub fn check_alpha(alpha: f64) -> Result<(), SynthesisError> {
    if alpha > 0.0 && alpha <= 0.5 {
        Ok(())
    } else {
        Err(SynthesisError::BadAlpha(alpha))
    }
}

/// Orders by scalar fitness descending, ties by candidate id ascending, and
/// cuts the top/bottom `ceil(alpha * n)` and halves `ceil(n / 2)`.
pub fn stratify(all: &[&CandidateEntry], alpha: f64) -> Result<StratifiedPools, SynthesisError> {
    check_alpha(alpha)?;
    let n = all.len();
    if n < 2 {
        return Err(SynthesisError::InsufficientCandidates(n));
    }
    let mut sorted: Vec<&CandidateEntry> = all.to_vec();
    sorted.sort_by(|a, b| b.scalar_fitness.total_cmp(&a.scalar_fitness).then(a.candidate_id.cmp(&b.candidate_id)));
    let ids: Vec<CandidateId> = sorted.iter().map(|c| c.candidate_id).collect();
    let tail = ceil_count(alpha * n as f64);
    let half = n.div_ceil(2);
    Ok(StratifiedPools {
        high: ids[..tail].iter().copied().collect(),
        low: ids[n - tail..].iter().copied().collect(),
        top_half: ids[..half].iter().copied().collect(),
        bottom_half: ids[n - half..].iter().copied().collect(),
        alpha,
        universe: n,
    })
}

/// Candidates whose similarity to their prompt lies in the closed band.
pub fn global_filter<'a>(candidates: &[&'a CandidateEntry], stats: &SimilarityStats) -> Vec<&'a CandidateEntry> {
    candidates
        .iter()
        .copied()
        .filter(|c| c.sim_to_prompt.is_some_and(|s| stats.in_band(s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSide {
    pub candidate_id: CandidateId,
    pub genotype: String,
    pub score: f64,
    pub sim: Option<f64>,
    pub source_stage: SourceStage,
}

impl PairSide {
    fn from_entry(c: &CandidateEntry, stage: SourceStage) -> Self {
        Self {
            candidate_id: c.candidate_id,
            genotype: c.genotype.clone(),
            score: c.scalar_fitness,
            sim: c.sim_to_prompt,
            source_stage: stage,
        }
    }

    /// Completion text as a proposer would have produced it.
    pub fn completion(&self) -> String {
        render_molecules(&[&self.genotype])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub prompt_id: u64,
    pub prompt_text: String,
    pub chosen: PairSide,
    pub rejected: PairSide,
    pub created_at: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    prompt: String,
    chosen: String,
    rejected: String,
    metadata: DatasetMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMetadata {
    prompt_id: u64,
    created_at: u64,
    chosen: PairSide,
    rejected: PairSide,
}

impl PreferenceTriplet {
    /// One preference-dataset line: prompt, chosen and rejected completions,
    /// and the scores, similarities and stages under `metadata`.
    pub fn to_dataset_line(&self) -> String {
        let line = DatasetLine {
            prompt: self.prompt_text.clone(),
            chosen: self.chosen.completion(),
            rejected: self.rejected.completion(),
            metadata: DatasetMetadata {
                prompt_id: self.prompt_id,
                created_at: self.created_at,
                chosen: self.chosen.clone(),
                rejected: self.rejected.clone(),
            },
        };
        serde_json::to_string(&line).expect("triplets always serialize")
    }

    pub fn from_dataset_line(text: &str) -> Result<Self, String> {
        let line: DatasetLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let t = PreferenceTriplet {
            prompt_id: line.metadata.prompt_id,
            prompt_text: line.prompt,
            chosen: line.metadata.chosen,
            rejected: line.metadata.rejected,
            created_at: line.metadata.created_at,
        };
        if t.chosen.completion() != line.chosen || t.rejected.completion() != line.rejected {
            return Err("completion text disagrees with metadata".into());
        }
        Ok(t)
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PreferenceTriplet>, SynthesisError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let t = PreferenceTriplet::from_dataset_line(&line)
            .map_err(|message| SynthesisError::Dataset { line: i + 1, message })?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub window_prompts: usize,
    pub sample_count: usize,
    pub stats: Option<SimilarityStats>,
    /// Size of the stratification universe (valid candidates in the window).
    pub universe: usize,
    pub chosen_stages: BTreeMap<SourceStage, usize>,
    pub rejected_stages: BTreeMap<SourceStage, usize>,
    pub skipped_prompts: usize,
    pub triplets: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthesisOutput {
    pub triplets: Vec<PreferenceTriplet>,
    pub report: SynthesisReport,
}

fn pick<'a>(
    pool: impl Iterator<Item = &'a CandidateEntry>,
    highest: bool,
) -> Option<&'a CandidateEntry> {
    pool.min_by(|a, b| {
        let by_score = if highest {
            b.scalar_fitness.total_cmp(&a.scalar_fitness)
        } else {
            a.scalar_fitness.total_cmp(&b.scalar_fitness)
        };
        by_score.then(a.candidate_id.cmp(&b.candidate_id))
    })
}

/// Stage ladder for one side. `in_tail` is the alpha pool, `in_half` the
/// matching half pool; `accept` filters extra eligibility (used for the
/// rejected side).
fn ladder<'a>(
    available: &[&'a CandidateEntry],
    stats: &SimilarityStats,
    in_tail: &BTreeSet<CandidateId>,
    in_half: &BTreeSet<CandidateId>,
    highest: bool,
    accept: impl Fn(&CandidateEntry) -> bool,
) -> Option<(&'a CandidateEntry, SourceStage)> {
    for stage in SourceStage::ALL {
        let hit = match stage.interval_index() {
            Some(i) => pick(
                available.iter().copied().filter(|c| {
                    let Some(sim) = c.sim_to_prompt else { return false };
                    in_tail.contains(&c.candidate_id)
                        && stats.in_band(sim)
                        && stats.intervals[i].contains(sim)
                        && accept(c)
                }),
                highest,
            ),
            None => pick(available.iter().copied().filter(|c| in_half.contains(&c.candidate_id) && accept(c)), highest),
        };
        if let Some(c) = hit {
            return Some((c, stage));
        }
    }
    None
}

/// Builds up to `r` triplets per prompt of the window.
///
/// The chosen side takes the highest-scoring candidate at the first stage
/// that has one; the rejected side takes the lowest-scoring one, restricted
/// to candidates with a different genotype and a strictly lower score than
/// the chosen candidate. A prompt with an empty side is skipped. Candidates
/// used by one triplet are not reused for the same prompt.
pub fn construct_pairs(
    window: &[&TrajectoryRecord],
    stats: &SimilarityStats,
    pools: &StratifiedPools,
    r: usize,
    created_at: u64,
) -> (Vec<PreferenceTriplet>, SynthesisReport) {
    let mut report = SynthesisReport { window_prompts: window.len(), ..SynthesisReport::default() };
    let mut out = Vec::new();
    for q in window {
        let mut available: Vec<&CandidateEntry> = q.candidates.iter().filter(|c| c.valid).collect();
        for round in 0..r {
            let Some((chosen, cs)) = ladder(&available, stats, &pools.high, &pools.top_half, true, |_| true) else {
                if round == 0 {
                    report.skipped_prompts += 1;
                }
                break;
            };
            let rejected = ladder(&available, stats, &pools.low, &pools.bottom_half, false, |c| {
                c.genotype != chosen.genotype && c.scalar_fitness < chosen.scalar_fitness
            });
            let Some((rejected, rs)) = rejected else {
                if round == 0 {
                    report.skipped_prompts += 1;
                }
                break;
            };
            *report.chosen_stages.entry(cs).or_default() += 1;
            *report.rejected_stages.entry(rs).or_default() += 1;
            out.push(PreferenceTriplet {
                prompt_id: q.prompt_id,
                prompt_text: q.prompt_text.clone(),
                chosen: PairSide::from_entry(chosen, cs),
                rejected: PairSide::from_entry(rejected, rs),
                created_at,
            });
            let used = [chosen.candidate_id, rejected.candidate_id];
            available.retain(|c| !used.contains(&c.candidate_id));
        }
    }
    report.triplets = out.len();
    (out, report)
}

/// Full pipeline over a history snapshot: statistics over every record,
/// pools and pairs over the most recent `l` prompts.
pub fn synthesize(
    history: &[TrajectoryRecord],
    l: usize,
    alpha: f64,
    r: usize,
) -> Result<SynthesisOutput, SynthesisError> {
    check_alpha(alpha)?;
    if r == 0 {
        return Err(SynthesisError::BadPairsPerPrompt);
    }
    let window = recent_prompts(history, l);
    if window.is_empty() {
        let report = SynthesisReport { note: Some("empty window: zero similarity samples".into()), ..Default::default() };
        return Ok(SynthesisOutput { triplets: Vec::new(), report });
    }
    let stats = compute_stats(history)?;
    let universe: Vec<&CandidateEntry> = window.iter().flat_map(|q| q.candidates.iter()).filter(|c| c.valid).collect();
    let pools = stratify(&universe, alpha)?;
    let created_at = history.last().map_or(0, |h| h.timestamp);
    let (triplets, mut report) = construct_pairs(&window, &stats, &pools, r, created_at);
    report.sample_count = stats.sample_count;
    report.universe = pools.universe;
    report.stats = Some(stats);
    Ok(SynthesisOutput { triplets, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::tests::{entry, prompt_record};

    fn scored(id: u64, fitness: f64, sim: Option<f64>) -> CandidateEntry {
        entry(id, &format!("G{id}"), vec![fitness], sim)
    }

    #[test]
    fn stratify_examples() {
        let cands: Vec<CandidateEntry> = (0..10).map(|i| scored(i, i as f64 / 10.0, None)).collect();
        let refs: Vec<&CandidateEntry> = cands.iter().collect();
        let p = stratify(&refs, 0.3).unwrap();
        assert_eq!(p.high, [9, 8, 7].map(CandidateId).into());
        assert_eq!(p.low, [0, 1, 2].map(CandidateId).into());
        assert_eq!(p.top_half.len(), 5);
        assert!(p.high.is_subset(&p.top_half) && p.low.is_subset(&p.bottom_half));

        let p = stratify(&refs[..3], 0.3).unwrap();
        assert_eq!((p.high.len(), p.low.len()), (1, 1));
        assert_eq!(p.top_half.len(), 2);

        let flat: Vec<CandidateEntry> = (0..4).map(|i| scored(i, 1.0, None)).collect();
        let p = stratify(&flat.iter().collect::<Vec<_>>(), 0.3).unwrap();
        assert_eq!(p.high, [CandidateId(0), CandidateId(1)].into());
        assert_eq!(p.low, [CandidateId(2), CandidateId(3)].into());

        assert!(matches!(stratify(&refs[..1], 0.3), Err(SynthesisError::InsufficientCandidates(1))));
        assert!(matches!(stratify(&refs, 0.6), Err(SynthesisError::BadAlpha(_))));
    }

    #[test]
    fn global_filter_examples() {
        let stats = SimilarityStats::from_moments(0.5, 0.3, 2);
        let cands = [scored(1, 0.0, Some(0.2)), scored(2, 0.0, Some(0.81)), scored(3, 0.0, Some(0.5)), scored(4, 0.0, None)];
        let refs: Vec<&CandidateEntry> = cands.iter().collect();
        let kept: Vec<u64> = global_filter(&refs, &stats).iter().map(|c| c.candidate_id.0).collect();
        assert_eq!(kept, vec![1, 3]);
        let degenerate = SimilarityStats::from_moments(0.5, 0.0, 2);
        let kept: Vec<u64> = global_filter(&refs, &degenerate).iter().map(|c| c.candidate_id.0).collect();
        assert_eq!(kept, vec![3]);
    }

    #[test]
    fn single_prompt_both_in_i1() {
        let stats = SimilarityStats::from_moments(0.5, 0.3, 2);
        let q = prompt_record(1, vec![scored(1, 0.9, Some(0.75)), scored(2, 0.5, Some(0.2)), scored(3, 0.1, Some(0.72))]);
        let all: Vec<&CandidateEntry> = q.candidates.iter().collect();
        let pools = stratify(&all, 0.3).unwrap();
        let (t, report) = construct_pairs(&[&q], &stats, &pools, 1, 7);
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].chosen.candidate_id, t[0].chosen.source_stage), (CandidateId(1), SourceStage::I1));
        assert_eq!((t[0].rejected.candidate_id, t[0].rejected.source_stage), (CandidateId(3), SourceStage::I1));
        assert_eq!(report.skipped_prompts, 0);
        assert_eq!(t[0].created_at, 7);
    }

    #[test]
    fn low_similarity_high_pool_falls_back_to_half() {
        let stats = SimilarityStats::from_moments(0.5, 0.3, 2);
        let q = prompt_record(
            1,
            vec![scored(1, 0.9, Some(0.3)), scored(2, 0.8, Some(0.4)), scored(3, 0.2, Some(0.6)), scored(4, 0.1, Some(0.7))],
        );
        let all: Vec<&CandidateEntry> = q.candidates.iter().collect();
        let pools = stratify(&all, 0.3).unwrap();
        let (t, _) = construct_pairs(&[&q], &stats, &pools, 1, 0);
        assert_eq!(t[0].chosen.source_stage, SourceStage::Half);
        assert_eq!(t[0].chosen.candidate_id, CandidateId(1));
        assert_eq!(t[0].rejected.source_stage, SourceStage::I1);
    }

    #[test]
    fn multiple_pairs_do_not_reuse_candidates() {
        let stats = SimilarityStats::from_moments(0.5, 0.5, 2);
        let cands: Vec<CandidateEntry> = (0..8).map(|i| scored(i, i as f64, Some(0.6))).collect();
        let q = prompt_record(1, cands);
        let all: Vec<&CandidateEntry> = q.candidates.iter().collect();
        let pools = stratify(&all, 0.5).unwrap();
        let (t, _) = construct_pairs(&[&q], &stats, &pools, 3, 0);
        assert_eq!(t.len(), 3);
        let mut ids: Vec<CandidateId> = t.iter().flat_map(|x| [x.chosen.candidate_id, x.rejected.candidate_id]).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        assert!(t.iter().all(|x| x.chosen.score > x.rejected.score));
    }

    #[test]
    fn identical_genotypes_never_pair() {
        let stats = SimilarityStats::from_moments(0.5, 0.5, 2);
        let q = prompt_record(1, vec![entry(1, "CC", vec![0.9], Some(0.5)), entry(2, "CC", vec![0.1], Some(0.5))]);
        let all: Vec<&CandidateEntry> = q.candidates.iter().collect();
        let pools = stratify(&all, 0.5).unwrap();
        let (t, report) = construct_pairs(&[&q], &stats, &pools, 1, 0);
        assert!(t.is_empty());
        assert_eq!(report.skipped_prompts, 1);
    }

    #[test]
    fn synthesize_empty_and_deterministic() {
        let out = synthesize(&[], 10, 0.3, 1).unwrap();
        assert!(out.triplets.is_empty());
        assert!(out.report.note.is_some());

        let history: Vec<TrajectoryRecord> = (1..=4)
            .map(|p| {
                prompt_record(
                    p,
                    (0..4).map(|i| scored(p * 10 + i, ((p * 7 + i * 3) % 10) as f64 / 10.0, Some(0.1 * (i + p) as f64))).collect(),
                )
            })
            .collect();
        let a = synthesize(&history, 3, 0.3, 1).unwrap();
        assert_eq!(a, synthesize(&history, 3, 0.3, 1).unwrap());
        assert!(a.triplets.len() <= 3);
        assert_eq!(a.report.window_prompts, 3);
    }

    #[test]
    fn dataset_line_round_trip() {
        let t = PreferenceTriplet {
            prompt_id: 4,
            prompt_text: "line one\nline two".into(),
            chosen: PairSide { candidate_id: CandidateId(1), genotype: "CCO".into(), score: 2.5, sim: Some(0.6), source_stage: SourceStage::I2 },
            rejected: PairSide { candidate_id: CandidateId(2), genotype: "CN".into(), score: 0.1, sim: None, source_stage: SourceStage::Half },
            created_at: 9,
        };
        let line = t.to_dataset_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["chosen"], "<mol>CCO</mol>");
        assert_eq!(v["metadata"]["rejected"]["source_stage"], "Half");
        assert_eq!(PreferenceTriplet::from_dataset_line(&line).unwrap(), t);
        let tampered = line.replace("<mol>CCO</mol>", "<mol>CCN</mol>");
        assert!(PreferenceTriplet::from_dataset_line(&tampered).is_err());
    }
}
