//! The generation, evaluation, learning and evolution loop.
//!
//! Each generation issues `M / 2` prompts. Slots alternate between the
//! frozen and the trainable proposer on a fixed interleave, offspring are
//! deduplicated against the population and archive, scored in one batch, and
//! survivors are chosen by Pareto rank and crowding. Every prompt becomes a
//! trajectory record. Once `f` evaluations have accumulated, preference pairs
//! are synthesized from the log and handed to the trainer.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ConfigError, FingerprinterConfig, InitConfig, ProposerConfig, RunConfig, ScorerConfig, SelectionConfig, TrainerConfig,
};
use crate::domain::{Candidate, CandidateId, Genotype, Population, ScoreVector};
use crate::memory::{CandidateEntry, MemoryError, RecordKind, TrajectoryRecord, TrajectoryStore, TRAJECTORY_SCHEMA_VERSION};
use crate::metrics::{emit_report, MetricsError, MetricsSnapshot, MetricsTracker};
use crate::objectives::{HttpTransport, ScoreOutcome, ScorerBinding, SubprocessTransport};
use crate::pareto::{nondominated_filter, nondominated_sort, select_survivors};
use crate::proposers::{
    chemistry_briefs, surrogate_briefs, ChatBackend, MockPolicy, PromptBuilder, PromptSpec, ProposalResult,
    ProposerBinding, ProposerError, ScriptedMockBackend, SharedPolicy,
};
use crate::similarity::{
    prompt_similarity, CachedFingerprinter, ExternalFingerprinter, Fingerprinter, NgramFingerprinter,
};
use crate::synthesis::{synthesize, SynthesisReport};
use crate::trainer::{export_dataset, validate_dataset, MockTrainerSettings, TrainerHandle, TrainerKind};

/// Guards fitness-proportional selection against an all-zero population.
pub const SELECTION_EPSILON: f64 = 1e-9;
pub const FROZEN_ID: &str = "frozen";
pub const TRAINABLE_ID: &str = "trainable";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("initialization failed: {0}")]
    InitFailed(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("selection needs at least 2 population members, found {0}")]
    TooFewParents(usize),
}

impl EngineError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        EngineError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

/// Whether slot `s` goes to the frozen proposer. Rounding the running count
/// `s * rho` spreads frozen slots evenly; `rho = 0.5` strictly alternates
/// starting with the frozen proposer.
pub fn slot_is_frozen(s: usize, rho: f64) -> bool {
    let count = |x: usize| (x as f64 * rho + 0.5).floor() as i64;
    count(s + 1) > count(s)
}

/// Chooses two distinct parents.
///
/// Tournament: the winner among `size` members drawn without replacement is
/// the one with the lowest Pareto rank, then largest crowding distance, then
/// highest fitness, then lowest id. The second tournament runs on the
/// population without the first parent. Fitness-proportional: probability
/// proportional to fitness plus [`SELECTION_EPSILON`], second draw without
/// the first parent.
pub fn select_parents(pop: &[Candidate], selection: &SelectionConfig, rng: &mut ChaCha8Rng) -> Result<(usize, usize), EngineError> {
    let n = pop.len();
    if n < 2 {
        return Err(EngineError::TooFewParents(n));
    }
    match selection {
        SelectionConfig::Tournament { size } => {
            let front = nondominated_sort(pop);
            let rank = front.rank_of();
            let key = |i: usize| {
                let c = &pop[i];
                (rank[&c.id], front.crowding.get(&c.id).copied().unwrap_or(0.0), c.fitness(), c.id)
            };
            let better = |a: usize, b: usize| {
                let (ra, ca, fa, ia) = key(a);
                let (rb, cb, fb, ib) = key(b);
                ra.cmp(&rb).then(cb.total_cmp(&ca)).then(fb.total_cmp(&fa)).then(ia.cmp(&ib))
            };
            let tournament = |rng: &mut ChaCha8Rng, pool: &[usize]| -> usize {
                let k = (*size).min(pool.len());
                sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).min_by(|&a, &b| better(a, b)).expect("k >= 1")
            };
            let all: Vec<usize> = (0..n).collect();
            let first = tournament(rng, &all);
            let rest: Vec<usize> = all.into_iter().filter(|&i| i != first).collect();
            let second = tournament(rng, &rest);
            Ok((first, second))
        }
        SelectionConfig::FitnessProportional => {
            let mut weights: Vec<f64> = pop.iter().map(|c| c.fitness().max(0.0) + SELECTION_EPSILON).collect();
            let first = WeightedIndex::new(&weights).expect("positive weights").sample(rng);
            weights[first] = 0.0;
            let second = WeightedIndex::new(&weights).expect("positive weights").sample(rng);
            Ok((first, second))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub generation: u32,
    pub evaluations_used: u64,
    pub triplets: usize,
    pub dataset: Option<String>,
    pub report: Option<SynthesisReport>,
    /// New model reference on success.
    pub model_ref: Option<String>,
    pub failure: Option<String>,
    /// Mean preference loss of the dataset under the updated policy against
    /// the pinned reference, when both expose log-probabilities.
    pub validation_mean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub trajectory_schema_version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub scorer: String,
    pub objectives: Vec<crate::domain::ObjectiveSpec>,
    pub fingerprinter: String,
    pub proposers: BTreeMap<String, String>,
    pub trainer: String,
    /// Reference model pinned at run start.
    pub reference_model: String,
    pub decisions: BTreeMap<String, String>,
}

fn decisions(config: &RunConfig) -> BTreeMap<String, String> {
    let d = [
        ("scalar_fitness", "sum of oriented scores".to_string()),
        ("znorm_zero_sigma", "all outputs 0".into()),
        ("hv_reference", "origin of oriented space".into()),
        ("hv_headline", "all-time archive".into()),
        ("crowding_boundary", "f64::MAX".into()),
        ("similarity_sigma", "population (1/n)".into()),
        ("prompt_similarity", "max over parent genotypes".into()),
        ("filter_band", "closed [mu - sigma, mu + sigma]".into()),
        ("stratification_universe", "valid candidates of the recent window".into()),
        ("stage_pick", "highest score for chosen, lowest for rejected, id tie-break".into()),
        ("empty_side", "skip prompt".into()),
        ("rejected_eligibility", "different genotype and strictly lower score than chosen".into()),
        ("dedup", "exact text against population, archive and earlier offspring".into()),
        ("alternation", format!("deterministic interleave, rho = {}", config.alternation)),
        ("failed_slots", "not retried within a generation".into()),
        ("second_parent", "drawn from the population without the first parent".into()),
        ("auc_budget", "evaluations used at the snapshot".into()),
        ("topk_pool", "all-time distinct genotypes".into()),
        ("update_every", config.update_every().to_string()),
        ("window", config.window().to_string()),
        ("beta", config.beta.to_string()),
    ];
    d.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub population: Vec<Candidate>,
    pub archive: Vec<Candidate>,
    pub timeline: Vec<MetricsSnapshot>,
    pub updates: Vec<UpdateLog>,
    pub manifest: RunManifest,
    pub prompts_per_generation: Vec<usize>,
}

fn proposer_binding(
    id: &str,
    cfg: &ProposerConfig,
) -> Result<(ProposerBinding, Option<(SharedPolicy, u64)>), EngineError> {
    let secs = |s: f64| Duration::from_secs_f64(s);
    Ok(match cfg {
        ProposerConfig::Remote { endpoint, model, auth_env, temperature, max_retries, timeout_secs, rate_limit } => {
            let mut b = ChatBackend::new(endpoint, model, auth_env.clone(), *temperature, secs(*timeout_secs));
            if let Some(r) = rate_limit {
                b = b.with_rate_limit(*r);
            }
            (ProposerBinding::new(id, *max_retries, Arc::new(b)), None)
        }
        ProposerConfig::Local { endpoint, model_ref, temperature, max_retries, timeout_secs, rate_limit } => {
            let mut b = ChatBackend::new(endpoint, model_ref, None, *temperature, secs(*timeout_secs));
            if let Some(r) = rate_limit {
                b = b.with_rate_limit(*r);
            }
            (ProposerBinding::new(id, *max_retries, Arc::new(b)), None)
        }
        ProposerConfig::Mock { seed, script, max_retries } => {
            let policy = match script {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| EngineError::io(path, e))?;
                    MockPolicy::from_toml(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?
                }
                None => MockPolicy::default(),
            };
            let shared: SharedPolicy = Arc::new(RwLock::new(policy));
            let backend = ScriptedMockBackend::new(*seed, shared.clone(), id);
            (ProposerBinding::new(id, *max_retries, Arc::new(backend)), Some((shared, *seed)))
        }
    })
}

/// Scorer binding described by a config section.
pub fn build_scorer(cfg: &ScorerConfig) -> Result<ScorerBinding, ConfigError> {
    let invalid = |e: crate::objectives::ObjectiveError| ConfigError::Invalid(e.to_string());
    match cfg {
        ScorerConfig::Builtin { objectives: None } => Ok(ScorerBinding::builtin_suite()),
        ScorerConfig::Builtin { objectives: Some(names) } => ScorerBinding::builtin(names).map_err(invalid),
        ScorerConfig::Subprocess { command, objectives, timeout_secs } => ScorerBinding::external(
            Box::new(SubprocessTransport { command: command.clone() }),
            objectives.clone(),
            Duration::from_secs_f64(*timeout_secs),
        )
        .map_err(invalid),
        ScorerConfig::Http { url, objectives, timeout_secs } => ScorerBinding::external(
            Box::new(HttpTransport { url: url.clone() }),
            objectives.clone(),
            Duration::from_secs_f64(*timeout_secs),
        )
        .map_err(invalid),
    }
}

pub fn build_fingerprinter(cfg: &FingerprinterConfig) -> Box<dyn Fingerprinter> {
    match cfg {
        FingerprinterConfig::Ngram => Box::new(NgramFingerprinter),
        FingerprinterConfig::External { command } => Box::new(ExternalFingerprinter { command: command.clone() }),
    }
}

fn entry_for(c: &Candidate, duplicate: bool, sim: Option<f64>) -> CandidateEntry {
    if c.valid {
        CandidateEntry {
            candidate_id: c.id,
            genotype: c.genotype.text().to_owned(),
            raw: c.scores.raw.clone(),
            oriented: c.scores.oriented.clone(),
            scalar_fitness: c.scores.scalar_fitness,
            valid: true,
            duplicate,
            sim_to_prompt: sim,
        }
    } else {
        CandidateEntry {
            candidate_id: c.id,
            genotype: c.genotype.text().to_owned(),
            raw: Vec::new(),
            oriented: Vec::new(),
            scalar_fitness: 0.0,
            valid: false,
            duplicate: false,
            sim_to_prompt: None,
        }
    }
}

/// Steppable run state.
pub struct Engine {
    config: RunConfig,
    scorer: ScorerBinding,
    fingerprinter: CachedFingerprinter<Box<dyn Fingerprinter>>,
    builder: PromptBuilder,
    frozen: ProposerBinding,
    trainable: ProposerBinding,
    reference: Option<ProposerBinding>,
    trainer: TrainerHandle,
    store: TrajectoryStore,
    tracker: MetricsTracker,
    population: Population,
    archive: Vec<Candidate>,
    rng: ChaCha8Rng,
    next_candidate: u64,
    next_prompt: u64,
    evaluations_used: u64,
    last_update_at: u64,
    generation: u32,
    timeline: Vec<MetricsSnapshot>,
    updates: Vec<UpdateLog>,
    prompts_per_generation: Vec<usize>,
    manifest: RunManifest,
    out_dir: Option<PathBuf>,
    scratch: Option<tempfile::TempDir>,
}

impl Engine {
    /// Builds bindings, initializes the population and logs the init
    /// record. With `out_dir`, the trajectory log is written through to
    /// `out_dir/trajectory.jsonl`.
    pub fn new(config: RunConfig, out_dir: Option<&Path>) -> Result<Self, EngineError> {
        config.validate()?;
        let scorer = build_scorer(&config.scorer)?;
        let briefs = match (&config.briefs, &config.scorer) {
            (Some(b), _) => b.clone(),
            (None, ScorerConfig::Builtin { .. }) => surrogate_briefs(),
            (None, _) => chemistry_briefs(),
        };
        let builder = PromptBuilder::new(scorer.specs(), &briefs).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let fingerprinter = CachedFingerprinter::new(build_fingerprinter(&config.fingerprinter));
        let (frozen, _) = proposer_binding(FROZEN_ID, &config.proposers.frozen)?;
        let (trainable, trainable_mock) = proposer_binding(TRAINABLE_ID, &config.proposers.trainable)?;

        let initial_ref = trainable.backend().model_ref().unwrap_or_else(|| TRAINABLE_ID.to_string());
        let (reference, trainer_kind) = match (&config.trainer, &trainable_mock) {
            (TrainerConfig::Mock { top_n, learning_rate }, Some((policy, seed))) => {
                let frozen_copy = Arc::new(RwLock::new(policy.read().expect("policy lock").clone()));
                let reference = ProposerBinding::new(
                    "reference",
                    0,
                    Arc::new(ScriptedMockBackend::new(*seed, frozen_copy, "reference")),
                );
                let settings = MockTrainerSettings { top_n: *top_n, learning_rate: *learning_rate };
                (Some(reference), TrainerKind::Mock { policy: policy.clone(), settings })
            }
            (TrainerConfig::Mock { .. }, None) => {
                return Err(ConfigError::Invalid("the mock trainer needs a mock trainable proposer".into()).into())
            }
            (TrainerConfig::Subprocess { command, timeout_secs }, _) => (
                None,
                TrainerKind::Subprocess { command: command.clone(), timeout: Duration::from_secs_f64(*timeout_secs) },
            ),
            (TrainerConfig::Http { endpoint, timeout_secs }, _) => (
                None,
                TrainerKind::Http { endpoint: endpoint.clone(), timeout: Duration::from_secs_f64(*timeout_secs) },
            ),
        };
        let trainer = TrainerHandle::new(trainer_kind, initial_ref.clone(), config.beta)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let (store, scratch) = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir.join("datasets")).map_err(|e| EngineError::io(dir, e))?;
                (TrajectoryStore::create(dir.join("trajectory.jsonl"))?, None)
            }
            None => (TrajectoryStore::in_memory(), Some(tempfile::tempdir().map_err(|e| EngineError::io(Path::new("tmp"), e))?)),
        };

        let manifest = RunManifest {
            engine_version: env!("CARGO_PKG_VERSION").into(),
            trajectory_schema_version: TRAJECTORY_SCHEMA_VERSION,
            seed: config.seed,
            config: config.clone(),
            scorer: scorer.describe(),
            objectives: scorer.specs().to_vec(),
            fingerprinter: fingerprinter.name(),
            proposers: BTreeMap::from([
                (FROZEN_ID.to_string(), frozen.backend().describe()),
                (TRAINABLE_ID.to_string(), trainable.backend().describe()),
            ]),
            trainer: trainer.describe(),
            reference_model: trainer.reference_id().to_string(),
            decisions: decisions(&config),
        };

        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let placeholder = Population::new(Vec::new(), config.population_size, 0).expect("empty population");
        let init_record = TrajectoryRecord {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            kind: RecordKind::Init,
            prompt_id: 0,
            timestamp: 0,
            generation: 0,
            capacity: Some(config.population_size),
            objectives: scorer.specs().to_vec(),
            parent_ids: Vec::new(),
            parent_genotypes: Vec::new(),
            prompt_text: String::new(),
            proposer_id: String::new(),
            failure: None,
            candidates: Vec::new(),
        };
        let tracker = MetricsTracker::from_init(&init_record)?;
        let mut engine = Engine {
            config,
            scorer,
            fingerprinter,
            builder,
            frozen,
            trainable,
            reference,
            trainer,
            store,
            tracker,
            population: placeholder,
            archive: Vec::new(),
            rng,
            next_candidate: 0,
            next_prompt: 1,
            evaluations_used: 0,
            last_update_at: 0,
            generation: 0,
            timeline: Vec::new(),
            updates: Vec::new(),
            prompts_per_generation: Vec::new(),
            manifest,
            out_dir: out_dir.map(Path::to_path_buf),
            scratch,
        };
        engine.init_population(init_record)?;
        Ok(engine)
    }

    fn fresh_id(&mut self) -> CandidateId {
        let id = CandidateId(self.next_candidate);
        self.next_candidate += 1;
        id
    }

    fn make_candidate(&mut self, genotype: Genotype, outcome: ScoreOutcome, proposer: &str, parents: Vec<CandidateId>) -> Candidate {
        let id = self.fresh_id();
        let (scores, valid) = match outcome {
            Ok(s) => (s, true),
            Err(e) => {
                log::debug!("candidate {id} `{}` rejected: {e}", genotype.text());
                (ScoreVector::sentinel(self.scorer.k()), false)
            }
        };
        Candidate { id, genotype, scores, valid, proposer_id: proposer.to_string(), parent_ids: parents, generation: self.generation }
    }

    fn init_population(&mut self, mut record: TrajectoryRecord) -> Result<(), EngineError> {
        let m = self.config.population_size;
        let mut members: Vec<Candidate> = Vec::new();
        match self.config.init.clone() {
            InitConfig::File { path, sample_n } => {
                let text = std::fs::read_to_string(&path).map_err(|e| EngineError::io(&path, e))?;
                let mut lines: Vec<&str> = Vec::new();
                for l in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                    if !lines.contains(&l) {
                        lines.push(l);
                    }
                }
                if lines.len() < sample_n {
                    return Err(EngineError::InitFailed(format!(
                        "{} has {} distinct lines, fewer than sample_n = {sample_n}",
                        path.display(),
                        lines.len()
                    )));
                }
                let picked: Vec<Genotype> = sample(&mut self.rng, lines.len(), sample_n)
                    .into_iter()
                    .map(|i| Genotype::new(lines[i]).expect("trimmed non-empty line"))
                    .collect();
                let outcomes = self.scorer.score_batch(&picked);
                for (g, o) in picked.into_iter().zip(outcomes) {
                    let c = self.make_candidate(g, o, "file", Vec::new());
                    if c.valid {
                        members.push(c);
                    }
                }
                if members.len() < m {
                    return Err(EngineError::InitFailed(format!(
                        "{} valid genotypes among {sample_n} sampled lines of {}, population needs {m}",
                        members.len(),
                        path.display()
                    )));
                }
                record.proposer_id = "file".into();
            }
            InitConfig::Proposer { binding, max_prompts } => {
                let proposer = if binding == FROZEN_ID { self.frozen.clone() } else { self.trainable.clone() };
                let prompt = self.builder.build_seed_prompt();
                let budget = max_prompts.unwrap_or(10 * m);
                let mut failures = 0usize;
                let mut nonce = 0u64;
                while members.len() < m {
                    if nonce as usize >= budget {
                        return Err(EngineError::InitFailed(format!(
                            "{} valid genotypes after {budget} prompts to `{binding}` ({failures} failed), population needs {m}",
                            members.len()
                        )));
                    }
                    match proposer.propose(&prompt, nonce) {
                        Ok(res) => {
                            let fresh: Vec<Genotype> = res
                                .parsed
                                .into_iter()
                                .filter(|g| !members.iter().any(|c| c.genotype.text() == g.text()))
                                .collect();
                            let outcomes = self.scorer.score_batch(&fresh);
                            for (g, o) in fresh.into_iter().zip(outcomes) {
                                if members.len() < m && !members.iter().any(|c| c.genotype.text() == g.text()) {
                                    let c = self.make_candidate(g, o, &binding, Vec::new());
                                    if c.valid {
                                        members.push(c);
                                    }
                                }
                            }
                        }
                        Err(e) => {
                            failures += 1;
                            log::warn!("init prompt {nonce} failed: {e}");
                        }
                    }
                    nonce += 1;
                }
                record.proposer_id = binding;
                record.prompt_text = prompt.rendered_text;
            }
        }
        let population = select_survivors(members, m, 0);
        record.candidates = population.members().iter().map(|c| entry_for(c, false, None)).collect();
        self.evaluations_used = record.candidates.len() as u64;
        self.archive = nondominated_filter(population.members().to_vec());
        self.population = population;
        self.tracker = MetricsTracker::from_init(&record)?;
        self.store.append(record)?;
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn is_done(&self) -> bool {
        self.generation >= self.config.generations
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn archive(&self) -> &[Candidate] {
        &self.archive
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        self.store.records()
    }

    pub fn timeline(&self) -> &[MetricsSnapshot] {
        &self.timeline
    }

    pub fn updates(&self) -> &[UpdateLog] {
        &self.updates
    }

    pub fn evaluations_used(&self) -> u64 {
        self.evaluations_used
    }

    pub fn trainer(&self) -> &TrainerHandle {
        &self.trainer
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn run_proposals(&self, jobs: &[(ProposerBinding, PromptSpec, u64)]) -> Vec<Result<ProposalResult, ProposerError>> {
        let workers = self.config.concurrency.min(jobs.len()).max(1);
        let slots: Vec<Mutex<Option<Result<ProposalResult, ProposerError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((binding, prompt, nonce)) = jobs.get(i) else { break };
                    let res = binding.propose(prompt, *nonce);
                    *slots[i].lock().expect("slot lock") = Some(res);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every slot ran")).collect()
    }

    /// Runs one generation followed by a possible trainer update. Returns
    /// `None` once the generation budget is spent.
    pub fn step(&mut self) -> Result<Option<MetricsSnapshot>, EngineError> {
        if self.is_done() {
            return Ok(None);
        }
        self.generation += 1;
        let g = self.generation;
        let m = self.config.population_size;
        let slots = m / 2;

        let members = self.population.members().to_vec();
        let mut jobs = Vec::with_capacity(slots);
        for s in 0..slots {
            let (a, b) = select_parents(&members, &self.config.selection, &mut self.rng)?;
            let binding = if slot_is_frozen(s, self.config.alternation) { self.frozen.clone() } else { self.trainable.clone() };
            let prompt = self.builder.build_prompt(&members[a], &members[b]);
            jobs.push((binding, prompt, u64::from(g) * m as u64 + s as u64));
        }
        let results = self.run_proposals(&jobs);

        // Known genotypes, for deduplication: population, archive, then
        // earlier offspring of this generation.
        let mut known: HashMap<String, Candidate> = HashMap::new();
        for c in self.archive.iter().chain(members.iter()) {
            known.entry(c.genotype.text().to_owned()).or_insert_with(|| c.clone());
        }

        struct Pending {
            genotype: Genotype,
            duplicate_of: Option<Candidate>,
            batch_index: Option<usize>,
        }
        let mut per_slot: Vec<Vec<Pending>> = Vec::with_capacity(slots);
        let mut batch: Vec<Genotype> = Vec::new();
        let mut first_seen: HashMap<String, usize> = HashMap::new();
        for res in &results {
            let mut pending = Vec::new();
            if let Ok(r) = res {
                for g in &r.parsed {
                    let duplicate_of = known.get(g.text()).cloned();
                    let batch_index = if duplicate_of.is_some() {
                        None
                    } else if let Some(&i) = first_seen.get(g.text()) {
                        Some(i)
                    } else {
                        first_seen.insert(g.text().to_owned(), batch.len());
                        batch.push(g.clone());
                        None
                    };
                    pending.push(Pending { genotype: g.clone(), duplicate_of, batch_index });
                }
            }
            per_slot.push(pending);
        }
        let outcomes = self.scorer.score_batch(&batch);
        let mut batch_candidates: Vec<Option<Candidate>> = vec![None; batch.len()];

        let mut offspring: Vec<Candidate> = Vec::new();
        let mut records: Vec<TrajectoryRecord> = Vec::with_capacity(slots);
        let mut batch_cursor = 0usize;
        for (((binding, prompt, _), res), pending) in jobs.iter().zip(&results).zip(per_slot) {
            let parents: Vec<CandidateId> = prompt.parents.iter().map(|p| p.id).collect();
            let parent_texts = prompt.parent_genotypes();
            let mut entries = Vec::new();
            for p in pending {
                let (candidate, duplicate) = match (p.duplicate_of, p.batch_index) {
                    (Some(orig), _) => {
                        let mut c = self.make_candidate(p.genotype, Ok(orig.scores.clone()), &binding.id, parents.clone());
                        c.valid = orig.valid;
                        (c, orig.valid)
                    }
                    (None, Some(i)) => {
                        let orig = batch_candidates[i].clone().expect("first occurrence precedes repeats");
                        let outcome = if orig.valid { Ok(orig.scores.clone()) } else { Err(crate::objectives::ObjectiveError::InvalidGenotype) };
                        let c = self.make_candidate(p.genotype, outcome, &binding.id, parents.clone());
                        let dup = c.valid;
                        (c, dup)
                    }
                    (None, None) => {
                        let outcome = outcomes[batch_cursor].clone();
                        let c = self.make_candidate(p.genotype, outcome, &binding.id, parents.clone());
                        batch_candidates[batch_cursor] = Some(c.clone());
                        batch_cursor += 1;
                        (c, false)
                    }
                };
                let sim = if candidate.valid {
                    Some(
                        prompt_similarity(&self.fingerprinter, candidate.genotype.text(), &parent_texts)
                            .map_err(|e| EngineError::InitFailed(format!("fingerprinting failed mid-run: {e}")))?,
                    )
                } else {
                    None
                };
                entries.push(entry_for(&candidate, duplicate, sim));
                if !duplicate {
                    self.evaluations_used += 1;
                    if candidate.valid {
                        offspring.push(candidate);
                    }
                }
            }
            let failure = match res {
                Err(e) => {
                    log::warn!("generation {g}: {e}");
                    Some(e.to_string())
                }
                Ok(_) => None,
            };
            records.push(TrajectoryRecord {
                schema_version: TRAJECTORY_SCHEMA_VERSION,
                kind: RecordKind::Prompt,
                prompt_id: self.next_prompt,
                timestamp: self.store.next_timestamp(),
                generation: g,
                capacity: None,
                objectives: Vec::new(),
                parent_ids: parents,
                parent_genotypes: parent_texts,
                prompt_text: prompt.rendered_text.clone(),
                proposer_id: binding.id.clone(),
                failure,
                candidates: entries,
            });
            self.next_prompt += 1;
            self.store.append(records.last().expect("just pushed").clone())?;
        }

        let mut archive = std::mem::take(&mut self.archive);
        archive.extend(offspring.iter().cloned());
        self.archive = nondominated_filter(archive);
        let mut pool = members;
        pool.extend(offspring);
        self.population = select_survivors(pool, m, g);

        let refs: Vec<&TrajectoryRecord> = records.iter().collect();
        let snapshot = self.tracker.ingest_generation(g, &refs)?;
        debug_assert_eq!(self.tracker.evaluations(), self.evaluations_used);
        self.timeline.push(snapshot.clone());
        self.prompts_per_generation.push(records.len());

        self.maybe_update();
        Ok(Some(snapshot))
    }

    fn dataset_dir(&self) -> PathBuf {
        match (&self.out_dir, &self.scratch) {
            (Some(d), _) => d.join("datasets"),
            (None, Some(t)) => t.path().to_path_buf(),
            (None, None) => std::env::temp_dir(),
        }
    }

    /// Synthesizes pairs and invokes the trainer once `f` evaluations have
    /// accumulated since the previous attempt. Failures are logged only.
    pub fn maybe_update(&mut self) {
        if self.evaluations_used - self.last_update_at < self.config.update_every() {
            return;
        }
        self.last_update_at = self.evaluations_used;
        let mut log = UpdateLog {
            generation: self.generation,
            evaluations_used: self.evaluations_used,
            triplets: 0,
            dataset: None,
            report: None,
            model_ref: None,
            failure: None,
            validation_mean_loss: None,
        };
        let out = match synthesize(self.store.records(), self.config.window(), self.config.alpha, self.config.pairs_per_prompt) {
            Ok(out) => out,
            Err(e) => {
                log.failure = Some(format!("synthesis: {e}"));
                self.updates.push(log);
                return;
            }
        };
        log.triplets = out.triplets.len();
        log.report = Some(out.report);
        if out.triplets.is_empty() {
            log.failure = Some("empty dataset, trainer not invoked".into());
            self.updates.push(log);
            return;
        }
        let name = format!("update-{:04}.jsonl", self.updates.len() + 1);
        let path = self.dataset_dir().join(&name);
        if let Err(e) = export_dataset(&out.triplets, &path) {
            log.failure = Some(format!("export: {e}"));
            self.updates.push(log);
            return;
        }
        log.dataset = Some(format!("datasets/{name}"));
        match self.trainer.invoke_update(&path) {
            Ok(new_ref) => {
                self.trainable.backend().set_model_ref(&new_ref);
                log.model_ref = Some(new_ref);
                if let Some(reference) = &self.reference {
                    log.validation_mean_loss =
                        validate_dataset(&out.triplets, &self.trainable, reference, self.config.beta).ok().map(|r| r.mean);
                }
            }
            Err(e) => {
                log::warn!("trainer update failed: {e}");
                log.failure = Some(e.to_string());
            }
        }
        self.updates.push(log);
    }

    /// Runs the remaining generations.
    pub fn run_to_end(&mut self) -> Result<(), EngineError> {
        while self.step()?.is_some() {}
        Ok(())
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            population: self.population.members().to_vec(),
            archive: self.archive.clone(),
            timeline: self.timeline.clone(),
            updates: self.updates.clone(),
            manifest: self.manifest.clone(),
            prompts_per_generation: self.prompts_per_generation.clone(),
        }
    }

    /// Writes metrics, summary, manifest, update log and the concatenated
    /// preference dataset into the output directory.
    pub fn write_artifacts(&self) -> Result<(), EngineError> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        emit_report(&self.timeline, &dir.join("metrics.csv"), &dir.join("summary.json"))?;
        let write = |name: &str, body: String| -> Result<(), EngineError> {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| EngineError::io(&p, e))
        };
        let mut manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        manifest.push('\n');
        write("manifest.json", manifest)?;
        let mut updates = serde_json::to_string_pretty(&self.updates).expect("updates serialize");
        updates.push('\n');
        write("updates.json", updates)?;
        let mut prefs = String::new();
        for u in &self.updates {
            if let (Some(rel), Some(_)) = (&u.dataset, &u.model_ref) {
                let p = dir.join(rel);
                prefs.push_str(&std::fs::read_to_string(&p).map_err(|e| EngineError::io(&p, e))?);
            }
        }
        write("preferences.jsonl", prefs)
    }
}

/// Convenience wrapper: build, run every generation, write artifacts.
pub fn run(config: RunConfig, out_dir: Option<&Path>) -> Result<RunReport, EngineError> {
    let mut engine = Engine::new(config, out_dir)?;
    engine.run_to_end()?;
    engine.write_artifacts()?;
    Ok(engine.report())
}
