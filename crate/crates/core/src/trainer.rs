//! Preference-optimization loss, dataset export and the trainer contract.
//!
//! No gradient step happens here. Training runs behind [`TrainerHandle`],
//! either an external command, an HTTP endpoint, or the in-process mock that
//! re-weights the scripted proposer's mutation units.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::tokenize;
use crate::objectives::run_with_timeout;
use crate::proposers::{MockUnit, ProposerBinding, ProposerError, SharedPolicy};
use crate::synthesis::{read_dataset, PreferenceTriplet};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("beta must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("chosen completion has zero probability")]
    ChosenZeroProbability,
    #[error("log-probability {0} is not a valid input")]
    BadLogprob(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("update failed: {0}")]
    UpdateFailed(String),
    #[error(transparent)]
    Capability(#[from] ProposerError),
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-ln sigmoid(beta * ((pc - rc) - (pr - rr)))` where `p*` are policy and
/// `r*` reference log-probabilities of the chosen (`c`) and rejected (`r`)
/// completions.
///
/// Only the rejected side may carry `-inf`. A rejected completion impossible
/// under the policy but not the reference gives zero loss; impossible under
/// both contributes a zero margin.
pub fn dpo_loss(
    policy_chosen: f64,
    policy_rejected: f64,
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
) -> Result<f64, TrainerError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(TrainerError::BadBeta(beta));
    }
    for lp in [policy_chosen, ref_chosen] {
        if lp == f64::NEG_INFINITY {
            return Err(TrainerError::ChosenZeroProbability);
        }
    }
    for lp in [policy_chosen, policy_rejected, ref_chosen, ref_rejected] {
        if lp.is_nan() || lp == f64::INFINITY {
            return Err(TrainerError::BadLogprob(lp));
        }
    }
    let chosen_margin = policy_chosen - ref_chosen;
    let rejected_margin = match (policy_rejected.is_finite(), ref_rejected.is_finite()) {
        (true, true) => policy_rejected - ref_rejected,
        (false, true) => f64::NEG_INFINITY,
        (true, false) => f64::INFINITY,
        (false, false) => 0.0,
    };
    let z = beta * (chosen_margin - rejected_margin);
    if z == f64::INFINITY {
        return Ok(0.0);
    }
    Ok(softplus(-z))
}

/// Triplets plus the settings an external trainer receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoBatch {
    pub triplets: Vec<PreferenceTriplet>,
    pub beta: f64,
    pub reference_id: String,
}

/// Writes one dataset line per triplet through a temporary file in the same
/// directory, renamed into place, so readers never see a partial file.
pub fn export_dataset(triplets: &[PreferenceTriplet], path: impl AsRef<Path>) -> Result<usize, TrainerError> {
    if triplets.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let path = path.as_ref();
    let io = |e: std::io::Error| TrainerError::Io { path: path.display().to_string(), message: e.to_string() };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    for t in triplets {
        writeln!(tmp, "{}", t.to_dataset_line()).map_err(io)?;
    }
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(triplets.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTrainerSettings {
    /// How many over-represented n-grams are promoted per update.
    pub top_n: usize,
    /// Weight added per unit of chosen-minus-rejected count.
    pub learning_rate: f64,
}

impl Default for MockTrainerSettings {
    fn default() -> Self {
        Self { top_n: 5, learning_rate: 1.0 }
    }
}

pub enum TrainerKind {
    /// `<command> --dataset <path> --beta <b> --ref <reference>`; the new
    /// reference is read from a `MODEL_REF <string>` output line.
    Subprocess { command: Vec<String>, timeout: Duration },
    /// POSTs the dataset file to `<endpoint>?beta=<b>&ref=<reference>`; the
    /// reply is either `{"model_ref": ...}` or the bare reference text.
    Http { endpoint: String, timeout: Duration },
    Mock { policy: SharedPolicy, settings: MockTrainerSettings },
}

pub struct TrainerHandle {
    kind: TrainerKind,
    current_model_ref: String,
    reference_id: String,
    beta: f64,
    update_count: u64,
}

impl TrainerHandle {
    /// `initial_ref` is both the starting model and the pinned reference.
    pub fn new(kind: TrainerKind, initial_ref: impl Into<String>, beta: f64) -> Result<Self, TrainerError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(TrainerError::BadBeta(beta));
        }
        let r = initial_ref.into();
        Ok(Self { kind, current_model_ref: r.clone(), reference_id: r, beta, update_count: 0 })
    }

    pub fn current_model_ref(&self) -> &str {
        &self.current_model_ref
    }

    pub fn reference_id(&self) -> &str {
        &self.reference_id
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            TrainerKind::Subprocess { command, .. } => format!("subprocess:{}", command.join(" ")),
            TrainerKind::Http { endpoint, .. } => format!("http:{endpoint}"),
            TrainerKind::Mock { settings, .. } => format!("mock:top_n={},lr={}", settings.top_n, settings.learning_rate),
        }
    }

    /// Runs one update from the dataset at `dataset_path`. State changes only
    /// on success.
    pub fn invoke_update(&mut self, dataset_path: &Path) -> Result<String, TrainerError> {
        let triplets = read_dataset(dataset_path).map_err(|e| TrainerError::UpdateFailed(e.to_string()))?;
        if triplets.is_empty() {
            return Err(TrainerError::EmptyDataset);
        }
        let new_ref = match &self.kind {
            TrainerKind::Subprocess { command, timeout } => {
                let args = [
                    "--dataset".to_string(),
                    dataset_path.display().to_string(),
                    "--beta".into(),
                    self.beta.to_string(),
                    "--ref".into(),
                    self.reference_id.clone(),
                ];
                let (ok, out) = run_with_timeout(command, &args, b"", *timeout).map_err(TrainerError::UpdateFailed)?;
                if !ok {
                    return Err(TrainerError::UpdateFailed("trainer exited with failure".into()));
                }
                out.lines()
                    .find_map(|l| l.strip_prefix("MODEL_REF "))
                    .map(|r| r.trim().to_owned())
                    .filter(|r| !r.is_empty())
                    .ok_or_else(|| TrainerError::UpdateFailed("no MODEL_REF line in trainer output".into()))?
            }
            TrainerKind::Http { endpoint, timeout } => {
                let body = std::fs::read(dataset_path).map_err(|e| TrainerError::UpdateFailed(e.to_string()))?;
                let agent = ureq::AgentBuilder::new().timeout(*timeout).build();
                let reply = agent
                    .post(endpoint)
                    .query("beta", &self.beta.to_string())
                    .query("ref", &self.reference_id)
                    .set("Content-Type", "application/x-ndjson")
                    .send_bytes(&body)
                    .map_err(|e| TrainerError::UpdateFailed(e.to_string()))?
                    .into_string()
                    .map_err(|e| TrainerError::UpdateFailed(e.to_string()))?;
                parse_http_model_ref(&reply).ok_or_else(|| TrainerError::UpdateFailed("reply carries no model reference".into()))?
            }
            TrainerKind::Mock { policy, settings } => {
                let promoted = overrepresented_ngrams(&triplets, settings.top_n);
                let mut p = policy.write().expect("mock policy lock poisoned");
                for (text, excess) in promoted {
                    let add = settings.learning_rate * excess as f64;
                    match p.units.iter_mut().find(|u| u.text == text) {
                        Some(u) => u.weight += add,
                        None => p.units.push(MockUnit { text, weight: add }),
                    }
                }
                p.version += 1;
                format!("mock-{}", self.update_count + 1)
            }
        };
        self.update_count += 1;
        self.current_model_ref = new_ref.clone();
        Ok(new_ref)
    }
}

fn parse_http_model_ref(reply: &str) -> Option<String> {
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(reply) {
        return v.get("model_ref").and_then(|r| r.as_str()).map(str::to_owned).filter(|r| !r.is_empty());
    }
    let r = reply.trim();
    (!r.is_empty() && !r.contains('\n')).then(|| r.to_owned())
}

fn balanced(tokens: &[&str]) -> bool {
    let mut depth = 0i32;
    for t in tokens {
        match *t {
            "(" | "[" => depth += 1,
            ")" | "]" => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

/// Token 2- and 3-grams (bracket-balanced only) ranked by how much more
/// often they occur in chosen than in rejected genotypes. Returns at most
/// `top_n` entries with a positive excess, best first, ties by text.
pub fn overrepresented_ngrams(triplets: &[PreferenceTriplet], top_n: usize) -> Vec<(String, i64)> {
    let mut excess: BTreeMap<String, i64> = BTreeMap::new();
    let mut count = |text: &str, sign: i64| {
        let tokens = tokenize(text);
        for n in 2..=3 {
            for w in tokens.windows(n) {
                if balanced(w) {
                    *excess.entry(w.concat()).or_default() += sign;
                }
            }
        }
    };
    for t in triplets {
        count(&t.chosen.genotype, 1);
        count(&t.rejected.genotype, -1);
    }
    let mut ranked: Vec<(String, i64)> = excess.into_iter().filter(|(_, e)| *e > 0).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_n);
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Loss of every triplet where it is defined, in dataset order.
    pub per_triplet: Vec<f64>,
    /// Triplets skipped because a model gives the chosen completion zero
    /// probability.
    pub undefined: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Loss of every triplet under a policy and a reference binding. Fails when
/// no triplet has a defined loss.
pub fn validate_dataset(
    triplets: &[PreferenceTriplet],
    policy: &ProposerBinding,
    reference: &ProposerBinding,
    beta: f64,
) -> Result<ValidationReport, TrainerError> {
    if triplets.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    for b in [policy, reference] {
        if !b.supports_logprob() {
            return Err(ProposerError::Capability(b.id.clone()).into());
        }
    }
    let mut per_triplet = Vec::with_capacity(triplets.len());
    let mut undefined = 0;
    for t in triplets {
        let (c, r) = (t.chosen.completion(), t.rejected.completion());
        match dpo_loss(
            policy.sequence_logprob(&t.prompt_text, &c)?,
            policy.sequence_logprob(&t.prompt_text, &r)?,
            reference.sequence_logprob(&t.prompt_text, &c)?,
            reference.sequence_logprob(&t.prompt_text, &r)?,
            beta,
        ) {
            Ok(loss) => per_triplet.push(loss),
            Err(TrainerError::ChosenZeroProbability) => undefined += 1,
            Err(e) => return Err(e),
        }
    }
    if per_triplet.is_empty() {
        return Err(TrainerError::ChosenZeroProbability);
    }
    let mean = per_triplet.iter().sum::<f64>() / per_triplet.len() as f64;
    let min = per_triplet.iter().copied().fold(f64::INFINITY, f64::min);
    let max = per_triplet.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ValidationReport { per_triplet, undefined, mean, min, max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::CandidateId;
    use crate::proposers::{MockPolicy, ScriptedMockBackend};
    use crate::synthesis::{PairSide, SourceStage};
    use std::sync::{Arc, RwLock};

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn loss_examples() {
        assert!((dpo_loss(-3.0, -4.0, -3.0, -4.0, 0.1).unwrap() - LN2).abs() < 1e-12);
        assert!((dpo_loss(1.0, 0.0, 0.0, 0.0, 1.0).unwrap() - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(dpo_loss(500.0, -500.0, 0.0, 0.0, 1.0).unwrap() < 1e-300);
        assert!((dpo_loss(-800.0, 0.0, 0.0, 0.0, 1.0).unwrap() - 800.0).abs() < 1e-9);
    }

    #[test]
    fn loss_infinity_rules() {
        assert!(matches!(dpo_loss(f64::NEG_INFINITY, -1.0, -1.0, -1.0, 1.0), Err(TrainerError::ChosenZeroProbability)));
        assert!(matches!(dpo_loss(-1.0, -1.0, f64::NEG_INFINITY, -1.0, 1.0), Err(TrainerError::ChosenZeroProbability)));
        assert_eq!(dpo_loss(-1.0, f64::NEG_INFINITY, -1.0, -2.0, 1.0).unwrap(), 0.0);
        assert!((dpo_loss(-1.0, f64::NEG_INFINITY, -1.0, f64::NEG_INFINITY, 1.0).unwrap() - LN2).abs() < 1e-12);
        assert_eq!(dpo_loss(-1.0, -1.0, -1.0, f64::NEG_INFINITY, 1.0).unwrap(), f64::INFINITY);
        assert!(matches!(dpo_loss(0.0, 0.0, 0.0, 0.0, 0.0), Err(TrainerError::BadBeta(_))));
        assert!(matches!(dpo_loss(f64::NAN, 0.0, 0.0, 0.0, 1.0), Err(TrainerError::BadLogprob(_))));
    }

    fn triplet(id: u64, chosen: &str, rejected: &str) -> PreferenceTriplet {
        let side = |cid: u64, g: &str, s: f64| PairSide {
            candidate_id: CandidateId(cid),
            genotype: g.into(),
            score: s,
            sim: Some(0.5),
            source_stage: SourceStage::I1,
        };
        PreferenceTriplet {
            prompt_id: id,
            prompt_text: "Parent molecules:\n- CCOCC\n- CCNCC\n".into(),
            chosen: side(id * 2, chosen, 2.0),
            rejected: side(id * 2 + 1, rejected, 1.0),
            created_at: id,
        }
    }

    #[test]
    fn export_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ts: Vec<_> = (0..5).map(|i| triplet(i, "CCO", "CN")).collect();
        assert_eq!(export_dataset(&ts, &path).unwrap(), 5);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 5);
        assert_eq!(read_dataset(&path).unwrap(), ts);
        assert!(matches!(export_dataset(&[], dir.path().join("e.jsonl")), Err(TrainerError::EmptyDataset)));
        assert!(!dir.path().join("e.jsonl").exists());
    }

    #[test]
    fn ngram_ranking() {
        let ts = vec![triplet(1, "CXYC", "CCOC"), triplet(2, "OXYO", "OCCO"), triplet(3, "NXYN", "NCCN")];
        let top = overrepresented_ngrams(&ts, 1);
        assert_eq!(top, vec![("XY".to_string(), 3)]);
        assert!(overrepresented_ngrams(&[triplet(1, "C(C)", "CC")], 10).iter().all(|(g, _)| g != "C(" && g != "C)"));
    }

    #[test]
    fn mock_update_counter_and_refs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        export_dataset(&[triplet(1, "CXYC", "CCOC")], &path).unwrap();
        let policy = Arc::new(RwLock::new(MockPolicy::default()));
        let kind = TrainerKind::Mock { policy: policy.clone(), settings: MockTrainerSettings::default() };
        let mut h = TrainerHandle::new(kind, "mock-0", 0.1).unwrap();
        let a = h.invoke_update(&path).unwrap();
        let b = h.invoke_update(&path).unwrap();
        assert_eq!(h.update_count(), 2);
        assert_ne!(a, b);
        assert_eq!(h.reference_id(), "mock-0");
        assert_eq!(policy.read().unwrap().version, 2);
        assert!(policy.read().unwrap().units.iter().any(|u| u.text == "XY"));
    }

    #[test]
    fn failed_update_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        export_dataset(&[triplet(1, "CXYC", "CCOC")], &path).unwrap();
        let kind = TrainerKind::Subprocess { command: vec!["sh".into(), "-c".into(), "exit 3".into()], timeout: Duration::from_secs(5) };
        let mut h = TrainerHandle::new(kind, "base", 0.1).unwrap();
        assert!(matches!(h.invoke_update(&path), Err(TrainerError::UpdateFailed(_))));
        assert_eq!((h.update_count(), h.current_model_ref()), (0, "base"));

        let policy = Arc::new(RwLock::new(MockPolicy::default()));
        let before = policy.read().unwrap().clone();
        let kind = TrainerKind::Mock { policy: policy.clone(), settings: MockTrainerSettings::default() };
        let mut h = TrainerHandle::new(kind, "mock-0", 0.1).unwrap();
        std::fs::write(&path, "not json\n").unwrap();
        assert!(h.invoke_update(&path).is_err());
        assert_eq!(*policy.read().unwrap(), before);
        assert_eq!(h.update_count(), 0);
    }

    #[test]
    fn subprocess_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        export_dataset(&[triplet(1, "CXYC", "CCOC")], &path).unwrap();
        let script = r#"while [ $# -gt 0 ]; do case $1 in --ref) r=$2;; --beta) b=$2;; esac; shift; done; echo "training"; echo "MODEL_REF $r+b$b""#;
        let kind = TrainerKind::Subprocess {
            command: vec!["sh".into(), "-c".into(), script.into(), "trainer".into()],
            timeout: Duration::from_secs(5),
        };
        let mut h = TrainerHandle::new(kind, "base", 0.25).unwrap();
        assert_eq!(h.invoke_update(&path).unwrap(), "base+b0.25");
        // The reference stays pinned to the initial model.
        assert_eq!(h.invoke_update(&path).unwrap(), "base+b0.25");
        assert_eq!(h.update_count(), 2);
    }

    #[test]
    fn http_reply_forms() {
        assert_eq!(parse_http_model_ref("{\"model_ref\":\"m-3\"}").as_deref(), Some("m-3"));
        assert_eq!(parse_http_model_ref(" m-4\n").as_deref(), Some("m-4"));
        assert_eq!(parse_http_model_ref("{\"status\":\"ok\"}"), None);
        assert_eq!(parse_http_model_ref(""), None);
    }

    #[test]
    fn validation_against_reference() {
        let base = Arc::new(RwLock::new(MockPolicy::default()));
        let frozen = Arc::new(RwLock::new(MockPolicy::default()));
        let policy = ProposerBinding::new("local", 0, Arc::new(ScriptedMockBackend::new(1, base.clone(), "local")));
        let reference = ProposerBinding::new("ref", 0, Arc::new(ScriptedMockBackend::new(1, frozen, "ref")));
        let ts: Vec<_> = vec![triplet(1, "CCOCCNCC", "CCNCC"), triplet(2, "CCNC(=O)NCC", "CCOCC")];
        let same = validate_dataset(&ts, &policy, &policy, 0.1).unwrap();
        assert!(same.per_triplet.iter().all(|l| (l - LN2).abs() < 1e-12));
        assert!(matches!(validate_dataset(&[], &policy, &reference, 0.1), Err(TrainerError::EmptyDataset)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        export_dataset(&ts, &path).unwrap();
        let kind = TrainerKind::Mock { policy: base, settings: MockTrainerSettings::default() };
        // The chosen child is the rejected crossover plus one `(N)` insertion,
        // the only over-represented n-gram, so the update favors it.
        let ts = vec![triplet(3, "CCOC(N)CC", "CCOCC")];
        export_dataset(&ts, &path).unwrap();
        TrainerHandle::new(kind, "mock-0", 0.1).unwrap().invoke_update(&path).unwrap();
        let biased = validate_dataset(&ts, &policy, &reference, 1.0).unwrap();
        assert!(biased.mean < LN2, "mean {}", biased.mean);
    }
}
