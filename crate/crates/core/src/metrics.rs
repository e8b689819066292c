//! Run metrics: best-ever top-k fitness and its area under the curve,
//! uniqueness, validity, population diversity and hypervolumes.
//!
//! [`MetricsTracker`] consumes trajectory records only, so the timeline the
//! engine writes during a run and the one recomputed from its log are the
//! same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Candidate, Genotype, ScoreVector};
use crate::memory::{CandidateEntry, RecordKind, TrajectoryRecord};
use crate::pareto::{hypervolume, nondominated_filter, select_survivors};
use crate::similarity::{tanimoto, Fingerprinter, NgramFingerprinter};

pub const CSV_HEADER: &str = "evals,top1F,top10F,top100F,top1auc,top10auc,top100auc,uniq,div,validity,hv_pop,hv_arch";
pub const TOP_KS: [usize; 3] = [1, 10, 100];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("log does not start with an init record")]
    MissingInit,
    #[error("record {0}: {1}")]
    BadRecord(u64, String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub generation: u32,
    pub evaluations_used: u64,
    /// Mean fitness of the best 1, 10 and 100 distinct genotypes seen so far.
    pub top_f: [f64; 3],
    /// Area under the running top-k curve over `[0, evaluations_used]`,
    /// divided by `evaluations_used * K`.
    pub top_auc: [f64; 3],
    /// Same area divided by `evaluations_used` only (fitness scale).
    pub top_auc_raw: [f64; 3],
    pub uniqueness: f64,
    pub diversity: f64,
    pub validity: f64,
    pub hv_population: f64,
    pub hv_archive: f64,
}

impl MetricsSnapshot {
    pub fn csv_row(&self) -> String {
        let mut s = self.evaluations_used.to_string();
        for v in self.top_f.iter().chain(&self.top_auc) {
            let _ = write!(s, ",{v}");
        }
        for v in [self.uniqueness, self.diversity, self.validity, self.hv_population, self.hv_archive] {
            let _ = write!(s, ",{v}");
        }
        s
    }
}

/// Mean of the `k` largest values (fewer when fewer exist); 0 when empty.
pub fn topk_mean(fitness_desc: &[f64], k: usize) -> f64 {
    let n = k.min(fitness_desc.len());
    if n == 0 {
        return 0.0;
    }
    fitness_desc[..n].iter().sum::<f64>() / n as f64
}

/// Trapezoidal area under `(evaluations, value)` points, with the first
/// value held flat back to zero evaluations, divided by `budget * k`.
pub fn topk_auc(points: &[(f64, f64)], budget: f64, k: usize) -> f64 {
    if points.is_empty() || budget <= 0.0 || k == 0 {
        return 0.0;
    }
    area(points) / (budget * k as f64)
}

fn area(points: &[(f64, f64)]) -> f64 {
    let Some(&(x0, y0)) = points.first() else { return 0.0 };
    let mut total = x0 * y0;
    for w in points.windows(2) {
        let ((xa, ya), (xb, yb)) = (w[0], w[1]);
        total += (xb - xa) * (ya + yb) / 2.0;
    }
    total
}

/// Distinct valid genotypes over valid genotypes; 0 when nothing is valid.
pub fn uniqueness<'a>(generated: impl IntoIterator<Item = &'a CandidateEntry>) -> f64 {
    let mut distinct = BTreeSet::new();
    let mut n = 0usize;
    for c in generated.into_iter().filter(|c| c.valid) {
        n += 1;
        distinct.insert(c.genotype.as_str());
    }
    if n == 0 {
        0.0
    } else {
        distinct.len() as f64 / n as f64
    }
}

/// Valid proposals over parsed proposals; 0 when nothing was parsed.
pub fn validity<'a>(generated: impl IntoIterator<Item = &'a CandidateEntry>) -> f64 {
    let (mut valid, mut n) = (0usize, 0usize);
    for c in generated {
        n += 1;
        valid += usize::from(c.valid);
    }
    if n == 0 {
        0.0
    } else {
        valid as f64 / n as f64
    }
}

/// One minus the mean pairwise Tanimoto similarity; 0 below two members.
pub fn diversity(texts: &[&str], fp: &dyn Fingerprinter) -> f64 {
    if texts.len() < 2 {
        return 0.0;
    }
    let fps: Vec<_> = texts.iter().map(|t| fp.fingerprint(t).unwrap_or_default()).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            sum += tanimoto(&fps[i], &fps[j]);
            pairs += 1;
        }
    }
    1.0 - sum / pairs as f64
}

fn entry_candidate(c: &CandidateEntry, rec: &TrajectoryRecord) -> Result<Candidate, MetricsError> {
    let genotype = Genotype::new(c.genotype.clone()).map_err(|e| MetricsError::BadRecord(rec.prompt_id, e.to_string()))?;
    Ok(Candidate {
        id: c.candidate_id,
        genotype,
        scores: ScoreVector { raw: c.raw.clone(), oriented: c.oriented.clone(), scalar_fitness: c.scalar_fitness },
        valid: c.valid,
        proposer_id: rec.proposer_id.clone(),
        parent_ids: rec.parent_ids.clone(),
        generation: rec.generation,
    })
}

/// Rebuilds population, archive and the metric timeline from records.
pub struct MetricsTracker {
    k: usize,
    capacity: usize,
    population: Vec<Candidate>,
    archive: Vec<Candidate>,
    best: BTreeMap<String, f64>,
    evaluations: u64,
    curve: [Vec<(f64, f64)>; 3],
    generated_valid: usize,
    generated_distinct: BTreeSet<String>,
    generated_total: usize,
}

impl MetricsTracker {
    pub fn from_init(init: &TrajectoryRecord) -> Result<Self, MetricsError> {
        if init.kind != RecordKind::Init {
            return Err(MetricsError::MissingInit);
        }
        let capacity = init.capacity.ok_or(MetricsError::MissingInit)?;
        let mut members = Vec::new();
        for c in init.candidates.iter().filter(|c| c.valid) {
            members.push(entry_candidate(c, init)?);
        }
        let k = if init.objectives.is_empty() {
            members.first().map_or(0, |m| m.scores.oriented.len())
        } else {
            init.objectives.len()
        };
        let mut t = Self {
            k,
            capacity,
            population: Vec::new(),
            archive: Vec::new(),
            best: BTreeMap::new(),
            evaluations: 0,
            curve: Default::default(),
            generated_valid: 0,
            generated_distinct: BTreeSet::new(),
            generated_total: 0,
        };
        t.absorb_scored(&init.candidates);
        t.archive = nondominated_filter(members.clone());
        t.population = select_survivors(members, capacity, 0).members().to_vec();
        t.push_curve_point();
        Ok(t)
    }

    pub fn objectives(&self) -> usize {
        self.k
    }

    pub fn population(&self) -> &[Candidate] {
        &self.population
    }

    pub fn archive(&self) -> &[Candidate] {
        &self.archive
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    fn absorb_scored(&mut self, entries: &[CandidateEntry]) {
        for c in entries.iter().filter(|c| !c.duplicate) {
            self.evaluations += 1;
            if c.valid {
                let slot = self.best.entry(c.genotype.clone()).or_insert(c.scalar_fitness);
                *slot = slot.max(c.scalar_fitness);
            }
        }
    }

    fn best_desc(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.best.values().copied().collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    fn push_curve_point(&mut self) {
        let best = self.best_desc();
        let x = self.evaluations as f64;
        for (curve, &k) in self.curve.iter_mut().zip(&TOP_KS) {
            let y = topk_mean(&best, k);
            match curve.last_mut() {
                Some(last) if last.0 == x => last.1 = y,
                _ => curve.push((x, y)),
            }
        }
    }

    /// Folds in the prompt records of one generation and returns its
    /// snapshot.
    pub fn ingest_generation(&mut self, generation: u32, records: &[&TrajectoryRecord]) -> Result<MetricsSnapshot, MetricsError> {
        let mut offspring = Vec::new();
        for rec in records {
            if rec.kind != RecordKind::Prompt {
                return Err(MetricsError::BadRecord(rec.prompt_id, "init record after the first line".into()));
            }
            self.absorb_scored(&rec.candidates);
            for c in &rec.candidates {
                self.generated_total += 1;
                if c.valid {
                    self.generated_valid += 1;
                    self.generated_distinct.insert(c.genotype.clone());
                    if !c.duplicate {
                        offspring.push(entry_candidate(c, rec)?);
                    }
                }
            }
        }
        let mut archive = std::mem::take(&mut self.archive);
        archive.extend(offspring.iter().cloned());
        self.archive = nondominated_filter(archive);
        let mut pool = std::mem::take(&mut self.population);
        pool.extend(offspring);
        self.population = select_survivors(pool, self.capacity, generation).members().to_vec();
        self.push_curve_point();
        Ok(self.snapshot(generation))
    }

    pub fn snapshot(&self, generation: u32) -> MetricsSnapshot {
        let best = self.best_desc();
        let budget = self.evaluations as f64;
        let mut top_f = [0.0; 3];
        let mut top_auc = [0.0; 3];
        let mut top_auc_raw = [0.0; 3];
        for (i, &k) in TOP_KS.iter().enumerate() {
            top_f[i] = topk_mean(&best, k);
            top_auc[i] = topk_auc(&self.curve[i], budget, self.k);
            top_auc_raw[i] = if budget > 0.0 { area(&self.curve[i]) / budget } else { 0.0 };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let texts: Vec<&str> = self.population.iter().map(|c| c.genotype.text()).collect();
        let hv = |set: &[Candidate]| {
            let points: Vec<Vec<f64>> = set.iter().map(|c| c.scores.oriented.clone()).collect();
            if points.is_empty() || self.k == 0 {
                return 0.0;
            }
            hypervolume(&points, &vec![0.0; self.k]).map_or(0.0, |h| h.value)
        };
        MetricsSnapshot {
            generation,
            evaluations_used: self.evaluations,
            top_f,
            top_auc,
            top_auc_raw,
            uniqueness: ratio(self.generated_distinct.len(), self.generated_valid),
            diversity: diversity(&texts, &NgramFingerprinter),
            validity: ratio(self.generated_valid, self.generated_total),
            hv_population: hv(&self.population),
            hv_archive: hv(&self.archive),
        }
    }
}

/// Recomputes the timeline of a log. A trailing generation is included only
/// when it is complete (`capacity / 2` prompt records), so a truncated log
/// yields a prefix of the full timeline.
pub fn timeline_from_records(records: &[TrajectoryRecord]) -> Result<Vec<MetricsSnapshot>, MetricsError> {
    let Some((init, rest)) = records.split_first() else { return Ok(Vec::new()) };
    let mut tracker = MetricsTracker::from_init(init)?;
    let per_generation = init.capacity.unwrap_or(0) / 2;
    let mut groups: Vec<(u32, Vec<&TrajectoryRecord>)> = Vec::new();
    for rec in rest {
        match groups.last_mut() {
            Some((g, list)) if *g == rec.generation => list.push(rec),
            _ => groups.push((rec.generation, vec![rec])),
        }
    }
    let last = groups.len();
    let mut out = Vec::with_capacity(groups.len());
    for (i, (g, list)) in groups.into_iter().enumerate() {
        if i + 1 == last && list.len() < per_generation {
            break;
        }
        out.push(tracker.ingest_generation(g, &list)?);
    }
    Ok(out)
}

pub fn render_csv(timeline: &[MetricsSnapshot]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for snap in timeline {
        s.push_str(&snap.csv_row());
        s.push('\n');
    }
    s
}

/// Parses a CSV produced by [`render_csv`] back into rows of numbers.
pub fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("unexpected header".into());
    }
    lines
        .map(|l| l.split(',').map(|f| f.parse::<f64>().map_err(|e| format!("{f}: {e}"))).collect())
        .collect()
}

/// Headline numbers in the column set of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub snapshots: usize,
    pub final_snapshot: Option<MetricsSnapshot>,
    pub hv: f64,
    pub hv_population: f64,
    pub top1f: f64,
    pub top10f: f64,
    pub top100f: f64,
    pub top1auc: f64,
    pub top10auc: f64,
    pub top100auc: f64,
    pub top1auc_raw: f64,
    pub top10auc_raw: f64,
    pub top100auc_raw: f64,
    pub uniqueness: f64,
    pub diversity: f64,
    pub validity: f64,
}

pub fn summarize(timeline: &[MetricsSnapshot]) -> MetricsSummary {
    let last = timeline.last();
    let f = |g: fn(&MetricsSnapshot) -> f64| last.map_or(0.0, g);
    MetricsSummary {
        snapshots: timeline.len(),
        final_snapshot: last.cloned(),
        hv: f(|s| s.hv_archive),
        hv_population: f(|s| s.hv_population),
        top1f: f(|s| s.top_f[0]),
        top10f: f(|s| s.top_f[1]),
        top100f: f(|s| s.top_f[2]),
        top1auc: f(|s| s.top_auc[0]),
        top10auc: f(|s| s.top_auc[1]),
        top100auc: f(|s| s.top_auc[2]),
        top1auc_raw: f(|s| s.top_auc_raw[0]),
        top10auc_raw: f(|s| s.top_auc_raw[1]),
        top100auc_raw: f(|s| s.top_auc_raw[2]),
        uniqueness: f(|s| s.uniqueness),
        diversity: f(|s| s.diversity),
        validity: f(|s| s.validity),
    }
}

/// Writes the CSV and the summary JSON.
pub fn emit_report(timeline: &[MetricsSnapshot], csv_path: &Path, summary_path: &Path) -> Result<(), MetricsError> {
    let io = |p: &Path, e: std::io::Error| MetricsError::Io { path: p.display().to_string(), message: e.to_string() };
    std::fs::write(csv_path, render_csv(timeline)).map_err(|e| io(csv_path, e))?;
    let mut summary = serde_json::to_string_pretty(&summarize(timeline)).expect("summary serializes");
    summary.push('\n');
    std::fs::write(summary_path, summary).map_err(|e| io(summary_path, e))
}
