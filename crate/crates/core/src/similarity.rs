//! Genotype fingerprints, Tanimoto similarity, similarity-to-prompt and the
//! empirical similarity statistics that drive pair synthesis.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::TrajectoryRecord;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("cannot fingerprint an empty genotype")]
    EmptyGenotype,
    #[error("record has no parent genotypes to compare against")]
    Promptless,
    #[error("need at least 2 similarity samples, found {0}")]
    InsufficientHistory(usize),
    #[error("external fingerprinter failed: {0}")]
    External(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Fingerprint {
    pub features: BTreeSet<u64>,
}

impl Fingerprint {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub trait Fingerprinter: Send + Sync {
    fn fingerprint(&self, text: &str) -> Result<Fingerprint, SimilarityError>;

    /// Batched form; external tools override this to amortise process start.
    fn fingerprint_all(&self, texts: &[&str]) -> Result<Vec<Fingerprint>, SimilarityError> {
        texts.iter().map(|t| self.fingerprint(t)).collect()
    }

    fn name(&self) -> String;
}

/// Character 2- and 3-grams hashed with FNV-1a. Text shorter than two
/// characters is fingerprinted as a single feature, the hash of the whole
/// text.
#[derive(Debug, Clone, Copy, Default)]
pub struct NgramFingerprinter;

impl Fingerprinter for NgramFingerprinter {
    fn fingerprint(&self, text: &str) -> Result<Fingerprint, SimilarityError> {
        if text.is_empty() {
            return Err(SimilarityError::EmptyGenotype);
        }
        let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
        let chars = bounds.len() - 1;
        let mut features = BTreeSet::new();
        if chars < 2 {
            features.insert(fnv1a64(text));
        }
        for n in 2..=3 {
            for start in 0..chars.saturating_sub(n - 1) {
                features.insert(fnv1a64(&text[bounds[start]..bounds[start + n]]));
            }
        }
        Ok(Fingerprint { features })
    }

    fn name(&self) -> String {
        "ngram23-fnv1a64".into()
    }
}

/// Delegates to an external program: genotype texts go to stdin one per line,
/// and the program prints one line of whitespace-separated decimal `u64`
/// features per genotype.
#[derive(Debug, Clone)]
pub struct ExternalFingerprinter {
    pub command: Vec<String>,
}

impl Fingerprinter for ExternalFingerprinter {
    fn fingerprint(&self, text: &str) -> Result<Fingerprint, SimilarityError> {
        Ok(self.fingerprint_all(&[text])?.remove(0))
    }

    fn fingerprint_all(&self, texts: &[&str]) -> Result<Vec<Fingerprint>, SimilarityError> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(SimilarityError::EmptyGenotype);
        }
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| SimilarityError::External("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| SimilarityError::External(e.to_string()))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            let payload: String = texts.iter().map(|t| format!("{t}\n")).collect();
            stdin.write_all(payload.as_bytes()).map_err(|e| SimilarityError::External(e.to_string()))?;
        }
        let output = child.wait_with_output().map_err(|e| SimilarityError::External(e.to_string()))?;
        if !output.status.success() {
            return Err(SimilarityError::External(format!("exit status {}", output.status)));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let fps: Vec<Fingerprint> = stdout
            .lines()
            .map(|line| {
                line.split_whitespace()
                    .map(|tok| tok.parse::<u64>().map_err(|e| SimilarityError::External(format!("bad feature `{tok}`: {e}"))))
                    .collect::<Result<BTreeSet<u64>, _>>()
                    .map(|features| Fingerprint { features })
            })
            .collect::<Result<_, _>>()?;
        if fps.len() != texts.len() {
            return Err(SimilarityError::External(format!("expected {} lines, got {}", texts.len(), fps.len())));
        }
        Ok(fps)
    }

    fn name(&self) -> String {
        format!("external:{}", self.command.join(" "))
    }
}

/// Memoising wrapper; safe to share across threads.
pub struct CachedFingerprinter<F> {
    inner: F,
    memo: RwLock<HashMap<String, Arc<Fingerprint>>>,
}

impl<F: Fingerprinter> CachedFingerprinter<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, memo: RwLock::new(HashMap::new()) }
    }

    pub fn get(&self, text: &str) -> Result<Arc<Fingerprint>, SimilarityError> {
        if let Some(fp) = self.memo.read().expect("fingerprint memo poisoned").get(text) {
            return Ok(Arc::clone(fp));
        }
        let fp = Arc::new(self.inner.fingerprint(text)?);
        self.memo.write().expect("fingerprint memo poisoned").insert(text.to_owned(), Arc::clone(&fp));
        Ok(fp)
    }
}

impl<F: Fingerprinter> Fingerprinter for CachedFingerprinter<F> {
    fn fingerprint(&self, text: &str) -> Result<Fingerprint, SimilarityError> {
        self.get(text).map(|fp| (*fp).clone())
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

impl Fingerprinter for Box<dyn Fingerprinter> {
    fn fingerprint(&self, text: &str) -> Result<Fingerprint, SimilarityError> {
        (**self).fingerprint(text)
    }

    fn fingerprint_all(&self, texts: &[&str]) -> Result<Vec<Fingerprint>, SimilarityError> {
        (**self).fingerprint_all(texts)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

/// |a ∩ b| / |a ∪ b|; two empty sets count as identical.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> f64 {
    let inter = a.features.intersection(&b.features).count();
    let union = a.features.len() + b.features.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Similarity of a candidate to a prompt: the maximum Tanimoto similarity to
/// any parent genotype embedded in that prompt.
pub fn prompt_similarity(
    fp: &dyn Fingerprinter,
    candidate: &str,
    parents: &[String],
) -> Result<f64, SimilarityError> {
    if parents.is_empty() {
        return Err(SimilarityError::Promptless);
    }
    let c = fp.fingerprint(candidate)?;
    parents.iter().try_fold(0.0f64, |best, p| Ok(best.max(tanimoto(&c, &fp.fingerprint(p)?))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn is_within(&self, outer: &Interval) -> bool {
        outer.lo <= self.lo && self.hi <= outer.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mu: f64,
    /// Population (1/n) standard deviation.
    pub sigma: f64,
    pub sample_count: usize,
    /// Closed acceptance band `[mu - sigma, mu + sigma]`.
    pub filter_band: Interval,
    /// Strict-to-relaxed upper windows, each clamped into `[0, 1]`.
    pub intervals: [Interval; 3],
}

impl SimilarityStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self, SimilarityError> {
        if samples.len() < 2 {
            return Err(SimilarityError::InsufficientHistory(samples.len()));
        }
        let n = samples.len() as f64;
        let mu = samples.iter().sum::<f64>() / n;
        let sigma = (samples.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt();
        Ok(Self::from_moments(mu, sigma, samples.len()))
    }

    pub fn from_moments(mu: f64, sigma: f64, sample_count: usize) -> Self {
        let clamp = |lo: f64, hi: f64| Interval { lo: lo.clamp(0.0, 1.0), hi: hi.clamp(0.0, 1.0) };
        let top = mu + sigma;
        Self {
            mu,
            sigma,
            sample_count,
            filter_band: clamp(mu - sigma, top),
            intervals: [
                clamp(mu + sigma * 2.0 / 3.0, top),
                clamp(mu + sigma / 3.0, top),
                clamp(mu, top),
            ],
        }
    }

    pub fn in_band(&self, sim: f64) -> bool {
        self.filter_band.contains(sim)
    }
}

/// All stored similarity-to-prompt values of valid candidates, from every
/// proposer, in history order.
pub fn similarity_samples(history: &[TrajectoryRecord]) -> Vec<f64> {
    history
        .iter()
        .filter(|r| r.is_prompt())
        .flat_map(|r| r.candidates.iter())
        .filter(|c| c.valid)
        .filter_map(|c| c.sim_to_prompt)
        .collect()
}

pub fn compute_stats(history: &[TrajectoryRecord]) -> Result<SimilarityStats, SimilarityError> {
    SimilarityStats::from_samples(&similarity_samples(history))
}
