//! Prompt construction, candidate proposal through pluggable backends, and
//! `<mol>…</mol>` response parsing.
//!
//! Three backend families exist: a chat-completion HTTP endpoint (used both
//! for a frozen remote model and for a locally served trainable model) and a
//! scripted mock whose generative program is simple enough that sequence
//! log-probabilities are exact.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{tokenize, Candidate, Genotype, ObjectiveSpec};
use crate::objectives::Surrogate;
use crate::similarity::fnv1a64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposerError {
    #[error("objective `{0}` has no prompt brief")]
    MissingBrief(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("proposer `{binding}` unavailable after {attempts} attempts: {last}")]
    ProposerUnavailable { binding: String, attempts: u32, last: String },
    #[error("binding `{0}` does not expose sequence log-probabilities")]
    Capability(String),
    #[error("bad mock script: {0}")]
    Script(String),
}

pub const OPEN_TAG: &str = "<mol>";
pub const CLOSE_TAG: &str = "</mol>";
/// Header line preceding the parent genotypes inside a rendered prompt.
pub const PARENTS_HEADER: &str = "Parent molecules:";
pub const CROSSOVER_TEMPLATE: &str = "crossover-v1";
pub const SEED_TEMPLATE: &str = "no-parent-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBrief {
    /// Display label used in directives, e.g. `SA`.
    pub label: String,
    pub text: String,
}

/// Briefs for the builtin surrogate suite.
pub fn surrogate_briefs() -> BTreeMap<String, ObjectiveBrief> {
    let brief = |label: &str, text: &str| ObjectiveBrief { label: label.into(), text: text.into() };
    Surrogate::ALL
        .into_iter()
        .map(|s| {
            let b = match s {
                Surrogate::LengthBand => brief("LENGTH", "rewards strings close to 20 tokens long; shorter or longer strings score lower."),
                Surrogate::CharBalance => brief("BALANCE", "measures how evenly tokens are used; repeating the same atom lowers it, mixing different atoms raises it."),
                Surrogate::MotifCount => brief("AMIDE", "counts amide groups written as C(=O)N, up to three."),
                Surrogate::MotifAvoid => brief("BROMINE", "counts bromine atoms; each Br makes the molecule worse."),
                Surrogate::BracketDepth => brief("NESTING", "is the deepest level of nested branches; flatter molecules are preferred."),
            };
            (s.name().to_owned(), b)
        })
        .collect()
}

/// Briefs for the five drug-design objectives served by external scorers.
pub fn chemistry_briefs() -> BTreeMap<String, ObjectiveBrief> {
    let brief = |label: &str, text: &str| ObjectiveBrief { label: label.into(), text: text.into() };
    BTreeMap::from([
        ("sa".into(), brief("SA", "synthetic accessibility; fewer complex ring systems and unusual groups make a molecule easier to make and lower the value.")),
        ("drd2".into(), brief("DRD2", "predicted activity against the dopamine D2 receptor.")),
        ("qed".into(), brief("QED", "quantitative drug-likeness combining size, polarity and hydrogen-bonding properties.")),
        ("gsk3b".into(), brief("GSK3\u{3b2}", "predicted activity against glycogen synthase kinase-3 beta.")),
        ("jnk3".into(), brief("JNK3", "predicted activity against c-Jun N-terminal kinase 3.")),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template_id: String,
    /// Zero parents for no-parent prompts, otherwise exactly two.
    pub parents: Vec<Candidate>,
    pub rendered_text: String,
    pub objective_briefs: Vec<String>,
}

impl PromptSpec {
    pub fn parent_genotypes(&self) -> Vec<String> {
        self.parents.iter().map(|p| p.genotype.text().to_owned()).collect()
    }
}

/// Renders prompts for a fixed objective registry.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    directives: Vec<String>,
    briefs: Vec<String>,
}

impl PromptBuilder {
    /// Fails when any objective lacks a brief, so configuration errors surface
    /// at startup rather than mid-run.
    pub fn new(specs: &[ObjectiveSpec], briefs: &BTreeMap<String, ObjectiveBrief>) -> Result<Self, ProposerError> {
        let mut directives = Vec::with_capacity(specs.len());
        let mut lines = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let brief = briefs.get(&spec.name).ok_or_else(|| ProposerError::MissingBrief(spec.name.clone()))?;
            directives.push(format!("{}. {} the {} value.", i + 1, spec.direction.verb(), brief.label));
            lines.push(format!("{}: {} {}", spec.name, brief.label, brief.text));
        }
        Ok(Self { directives, briefs: lines })
    }

    fn header(&self, out: &mut String) {
        out.push_str("Suggest new molecules that satisfy the following requirements:\n");
        for d in &self.directives {
            out.push_str(d);
            out.push('\n');
        }
        out.push('\n');
        for b in &self.briefs {
            out.push_str(b);
            out.push('\n');
        }
        out.push('\n');
    }

    fn footer(out: &mut String) {
        out.push_str(
            "Do not write code and do not explain. Each new molecule must start with <mol> and end with </mol>, \
             written in SMILES form. Answer with exactly two molecules and stop.",
        );
    }

    pub fn build_prompt(&self, p1: &Candidate, p2: &Candidate) -> PromptSpec {
        let mut text = String::new();
        self.header(&mut text);
        text.push_str(PARENTS_HEADER);
        text.push('\n');
        for p in [p1, p2] {
            text.push_str("- ");
            text.push_str(p.genotype.text());
            text.push('\n');
        }
        text.push('\n');
        text.push_str("Give me 2 new molecules that fit the requirements.\n\n");
        text.push_str("Build them by applying crossover to the parent molecules, guided by your own knowledge. Every molecule must be valid.\n\n");
        Self::footer(&mut text);
        PromptSpec {
            template_id: CROSSOVER_TEMPLATE.into(),
            parents: vec![p1.clone(), p2.clone()],
            rendered_text: text,
            objective_briefs: self.briefs.clone(),
        }
    }

    /// Prompt without parents, used to seed an initial population.
    pub fn build_seed_prompt(&self) -> PromptSpec {
        let mut text = String::new();
        self.header(&mut text);
        text.push_str("Give me 2 new molecules that fit the requirements.\n\n");
        Self::footer(&mut text);
        PromptSpec {
            template_id: SEED_TEMPLATE.into(),
            parents: Vec::new(),
            rendered_text: text,
            objective_briefs: self.briefs.clone(),
        }
    }
}

/// Extracts the parent genotypes listed under [`PARENTS_HEADER`].
pub fn parents_in_prompt(prompt_text: &str) -> Vec<String> {
    let mut lines = prompt_text.lines();
    if !lines.any(|l| l.trim() == PARENTS_HEADER) {
        return Vec::new();
    }
    lines.map_while(|l| l.strip_prefix("- ")).map(|s| s.trim().to_owned()).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedResponse {
    pub genotypes: Vec<Genotype>,
    pub warnings: Vec<String>,
}

/// Maximum molecules accepted from a single response.
pub const MAX_PER_RESPONSE: usize = 2;

/// Extracts non-overlapping `<mol>…</mol>` spans in order. A closing tag
/// pairs with the nearest opening tag before it, so stray openers are
/// skipped. Spans are trimmed; empty or multi-line spans are dropped; only
/// the first two survive.
pub fn parse_response(raw: &str) -> ParsedResponse {
    let mut out = ParsedResponse::default();
    let mut found = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find(OPEN_TAG) {
        let after_open = &rest[open + OPEN_TAG.len()..];
        let Some(close) = after_open.find(CLOSE_TAG) else {
            out.warnings.push("unterminated <mol> tag".into());
            break;
        };
        let mut body = &after_open[..close];
        if let Some(inner) = body.rfind(OPEN_TAG) {
            out.warnings.push("nested or stray <mol> tag skipped".into());
            body = &body[inner + OPEN_TAG.len()..];
        }
        rest = &after_open[close + CLOSE_TAG.len()..];
        let body = body.trim();
        if body.is_empty() {
            continue;
        }
        match Genotype::new(body) {
            Ok(g) => found.push(g),
            Err(_) => out.warnings.push(format!("dropped multi-line span `{}`", body.replace('\n', "\\n"))),
        }
    }
    if found.len() > MAX_PER_RESPONSE {
        out.warnings.push(format!("{} molecules returned, kept the first {MAX_PER_RESPONSE}", found.len()));
        found.truncate(MAX_PER_RESPONSE);
    }
    out.genotypes = found;
    out
}

pub fn render_molecules(molecules: &[&str]) -> String {
    molecules.iter().map(|m| format!("{OPEN_TAG}{m}{CLOSE_TAG}")).collect::<Vec<_>>().join("\n")
}

pub trait ProposerBackend: Send + Sync {
    /// One backend invocation. `nonce` and `attempt` vary the sample for
    /// stochastic backends that can be seeded.
    fn complete(&self, prompt: &PromptSpec, nonce: u64, attempt: u32) -> Result<String, ProposerError>;

    fn supports_logprob(&self) -> bool {
        false
    }

    /// Total log-probability of `completion` given the prompt text.
    fn sequence_logprob(&self, _prompt_text: &str, _completion: &str) -> Result<f64, ProposerError> {
        Err(ProposerError::Capability(self.describe()))
    }

    /// Swaps the served model reference (trainable endpoints only).
    fn set_model_ref(&self, _model_ref: &str) {}

    fn model_ref(&self) -> Option<String> {
        None
    }

    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalResult {
    pub raw_text: String,
    pub parsed: Vec<Genotype>,
    pub parse_errors: Vec<String>,
    pub logprob: Option<f64>,
    pub attempts: u32,
}

#[derive(Clone)]
pub struct ProposerBinding {
    pub id: String,
    pub max_retries: u32,
    backend: Arc<dyn ProposerBackend>,
}

impl std::fmt::Debug for ProposerBinding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProposerBinding")
            .field("id", &self.id)
            .field("max_retries", &self.max_retries)
            .field("backend", &self.backend.describe())
            .finish()
    }
}

impl ProposerBinding {
    pub fn new(id: impl Into<String>, max_retries: u32, backend: Arc<dyn ProposerBackend>) -> Self {
        Self { id: id.into(), max_retries, backend }
    }

    pub fn backend(&self) -> &Arc<dyn ProposerBackend> {
        &self.backend
    }

    pub fn supports_logprob(&self) -> bool {
        self.backend.supports_logprob()
    }

    /// Invokes the backend, retrying on transport failure or when nothing
    /// parses, up to `max_retries` extra attempts.
    pub fn propose(&self, prompt: &PromptSpec, nonce: u64) -> Result<ProposalResult, ProposerError> {
        let mut last = String::from("no attempt made");
        let attempts = self.max_retries + 1;
        for attempt in 0..attempts {
            match self.backend.complete(prompt, nonce, attempt) {
                Ok(raw_text) => {
                    let parsed = parse_response(&raw_text);
                    if parsed.genotypes.is_empty() {
                        last = "response contained no molecules".into();
                        continue;
                    }
                    let logprob = if self.backend.supports_logprob() {
                        self.backend.sequence_logprob(&prompt.rendered_text, &raw_text).ok()
                    } else {
                        None
                    };
                    return Ok(ProposalResult {
                        raw_text,
                        parsed: parsed.genotypes,
                        parse_errors: parsed.warnings,
                        logprob,
                        attempts: attempt + 1,
                    });
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(ProposerError::ProposerUnavailable { binding: self.id.clone(), attempts, last })
    }

    pub fn sequence_logprob(&self, prompt_text: &str, completion: &str) -> Result<f64, ProposerError> {
        if !self.backend.supports_logprob() {
            return Err(ProposerError::Capability(self.id.clone()));
        }
        self.backend.sequence_logprob(prompt_text, completion)
    }
}

/// Chat-completion HTTP backend. The request body is
/// `{"model", "messages": [{"role": "user", "content"}], "temperature"}` and
/// the reply text is read from `choices[0].message.content`.
pub struct ChatBackend {
    endpoint: String,
    model: RwLock<String>,
    auth_env_var: Option<String>,
    temperature: f64,
    timeout: Duration,
    min_interval: Option<Duration>,
    last_call: Mutex<Option<Instant>>,
}

impl ChatBackend {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        auth_env_var: Option<String>,
        temperature: f64,
        timeout: Duration,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: RwLock::new(model.into()),
            auth_env_var,
            temperature,
            timeout,
            min_interval: None,
            last_call: Mutex::new(None),
        }
    }

    /// Caps the request rate of this binding.
    pub fn with_rate_limit(mut self, requests_per_second: f64) -> Self {
        if requests_per_second > 0.0 {
            self.min_interval = Some(Duration::from_secs_f64(1.0 / requests_per_second));
        }
        self
    }

    fn throttle(&self) {
        let Some(interval) = self.min_interval else { return };
        let mut last = self.last_call.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl ProposerBackend for ChatBackend {
    fn complete(&self, prompt: &PromptSpec, _nonce: u64, _attempt: u32) -> Result<String, ProposerError> {
        self.throttle();
        let model = self.model.read().expect("model ref lock poisoned").clone();
        let body = serde_json::json!({
            "model": model,
            "messages": [{"role": "user", "content": prompt.rendered_text}],
            "temperature": self.temperature,
        });
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut req = agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(var) = &self.auth_env_var {
            let token = std::env::var(var)
                .map_err(|_| ProposerError::Transport(format!("environment variable {var} is not set")))?;
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let reply: serde_json::Value = req
            .send_json(body)
            .map_err(|e| ProposerError::Transport(e.to_string()))?
            .into_json()
            .map_err(|e| ProposerError::Transport(e.to_string()))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| ProposerError::Transport("reply has no choices[0].message.content".into()))
    }

    fn set_model_ref(&self, model_ref: &str) {
        *self.model.write().expect("model ref lock poisoned") = model_ref.to_owned();
    }

    fn model_ref(&self) -> Option<String> {
        Some(self.model.read().expect("model ref lock poisoned").clone())
    }

    fn describe(&self) -> String {
        format!("chat:{} model={}", self.endpoint, self.model.read().expect("model ref lock poisoned"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockUnit {
    pub text: String,
    pub weight: f64,
}

/// Generative program of the scripted mock.
///
/// With two parents, each of the two emitted molecules is produced by
/// 1. choosing a cut `i` uniformly among the bracket-balanced token
///    boundaries of parent A and a cut `j` uniformly among those of parent B,
///    giving `A[..i] + B[j..]`;
/// 2. with probability `mutation_rate`, inserting one unit (drawn with
///    probability proportional to its weight) at a uniformly chosen token
///    boundary of that child.
///
/// Without parents, a molecule is `n` weighted units concatenated, with `n`
/// uniform in `min_units..=max_units`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockPolicy {
    pub units: Vec<MockUnit>,
    pub mutation_rate: f64,
    pub min_units: usize,
    pub max_units: usize,
    #[serde(default)]
    pub version: u64,
}

impl Default for MockPolicy {
    fn default() -> Self {
        let units = [
            ("C", 6.0),
            ("N", 1.5),
            ("O", 1.5),
            ("S", 0.5),
            ("F", 0.5),
            ("Cl", 0.5),
            ("Br", 0.5),
            ("(C)", 1.0),
            ("(=O)", 1.0),
            ("(N)", 0.5),
            ("C(=O)N", 1.0),
            ("c1ccccc1", 0.5),
        ];
        Self {
            units: units.iter().map(|(t, w)| MockUnit { text: (*t).into(), weight: *w }).collect(),
            mutation_rate: 0.7,
            min_units: 4,
            max_units: 12,
            version: 0,
        }
    }
}

impl MockPolicy {
    pub fn from_toml(text: &str) -> Result<Self, ProposerError> {
        let policy: MockPolicy = toml::from_str(text).map_err(|e| ProposerError::Script(e.to_string()))?;
        policy.check()?;
        Ok(policy)
    }

    pub fn check(&self) -> Result<(), ProposerError> {
        if self.units.is_empty() || self.units.iter().any(|u| u.text.is_empty() || u.weight.is_nan() || u.weight <= 0.0) {
            return Err(ProposerError::Script("units must be non-empty with positive weights".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(ProposerError::Script("mutation_rate must lie in [0, 1]".into()));
        }
        if self.min_units == 0 || self.min_units > self.max_units {
            return Err(ProposerError::Script("need 1 <= min_units <= max_units".into()));
        }
        Ok(())
    }

    fn total_weight(&self) -> f64 {
        self.units.iter().map(|u| u.weight).sum()
    }

    fn unit_probabilities(&self) -> HashMap<&str, f64> {
        let total = self.total_weight();
        let mut p: HashMap<&str, f64> = HashMap::new();
        for u in &self.units {
            *p.entry(u.text.as_str()).or_default() += u.weight / total;
        }
        p
    }

    fn draw_unit(&self, rng: &mut ChaCha8Rng) -> &str {
        let mut x = rng.gen::<f64>() * self.total_weight();
        for u in &self.units {
            if x < u.weight {
                return &u.text;
            }
            x -= u.weight;
        }
        &self.units.last().expect("policy has units").text
    }

    /// Samples one child of the two parents.
    pub fn sample_child(&self, a: &str, b: &str, rng: &mut ChaCha8Rng) -> String {
        let cuts_a = prefix_cuts(a);
        let cuts_b = suffix_cuts(b);
        let i = cuts_a[rng.gen_range(0..cuts_a.len())];
        let j = cuts_b[rng.gen_range(0..cuts_b.len())];
        let mut child = format!("{}{}", &a[..i], &b[j..]);
        if rng.gen::<f64>() < self.mutation_rate {
            let bounds = token_boundaries(&child);
            let pos = bounds[rng.gen_range(0..bounds.len())];
            let unit = self.draw_unit(rng);
            child.insert_str(pos, unit);
        }
        child
    }

    pub fn sample_free(&self, rng: &mut ChaCha8Rng) -> String {
        let n = rng.gen_range(self.min_units..=self.max_units);
        (0..n).map(|_| self.draw_unit(rng)).collect()
    }

    /// Exact probability that one sampled child equals `m`.
    pub fn child_probability(&self, a: &str, b: &str, m: &str) -> f64 {
        let cuts_a = prefix_cuts(a);
        let cuts_b = suffix_cuts(b);
        let probs = self.unit_probabilities();
        let pair_weight = 1.0 / (cuts_a.len() * cuts_b.len()) as f64;
        let mut total = 0.0;
        for &i in &cuts_a {
            for &j in &cuts_b {
                let x = format!("{}{}", &a[..i], &b[j..]);
                let mut p = 0.0;
                if x == m {
                    p += 1.0 - self.mutation_rate;
                }
                if self.mutation_rate > 0.0 && m.len() > x.len() {
                    let bounds = token_boundaries(&x);
                    let pos_weight = 1.0 / bounds.len() as f64;
                    let unit_len = m.len() - x.len();
                    for &pos in &bounds {
                        if m.as_bytes()[..pos] != x.as_bytes()[..pos] || m.as_bytes()[pos + unit_len..] != x.as_bytes()[pos..] {
                            continue;
                        }
                        if let Some(middle) = m.get(pos..pos + unit_len) {
                            if let Some(pu) = probs.get(middle) {
                                p += self.mutation_rate * pos_weight * pu;
                            }
                        }
                    }
                }
                total += pair_weight * p;
            }
        }
        total
    }

    /// Exact probability that one parentless sample equals `m`.
    pub fn free_probability(&self, m: &str) -> f64 {
        let probs = self.unit_probabilities();
        let len = m.len();
        // ways[pos] = probability mass of producing m[..pos] with k units
        let mut ways = vec![0.0f64; len + 1];
        ways[0] = 1.0;
        let mut total = 0.0;
        let span = (self.max_units - self.min_units + 1) as f64;
        for k in 1..=self.max_units {
            let mut next = vec![0.0f64; len + 1];
            for start in 0..len {
                if ways[start] == 0.0 || !m.is_char_boundary(start) {
                    continue;
                }
                for (unit, pu) in &probs {
                    let end = start + unit.len();
                    if end <= len && &m[start..end] == *unit {
                        next[end] += ways[start] * pu;
                    }
                }
            }
            ways = next;
            if k >= self.min_units {
                total += ways[len] / span;
            }
        }
        total
    }
}

/// Byte offsets of token boundaries, including both ends.
fn token_boundaries(text: &str) -> Vec<usize> {
    let mut out = vec![0];
    let mut pos = 0;
    for t in tokenize(text) {
        pos += t.len();
        out.push(pos);
    }
    out
}

fn depth_delta(tok: &str) -> i64 {
    match tok {
        "(" | "[" => 1,
        ")" | "]" => -1,
        _ => 0,
    }
}

/// Boundaries whose prefix is bracket-balanced.
fn prefix_cuts(text: &str) -> Vec<usize> {
    let mut out = vec![0];
    let (mut depth, mut pos) = (0i64, 0usize);
    for t in tokenize(text) {
        depth += depth_delta(t);
        pos += t.len();
        if depth == 0 {
            out.push(pos);
        }
    }
    out
}

/// Boundaries whose suffix is bracket-balanced.
fn suffix_cuts(text: &str) -> Vec<usize> {
    let tokens = tokenize(text);
    let mut out = vec![text.len()];
    let (mut depth, mut pos) = (0i64, text.len());
    for t in tokens.iter().rev() {
        depth += depth_delta(t);
        pos -= t.len();
        if depth == 0 {
            out.push(pos);
        }
    }
    out.reverse();
    out.dedup();
    out
}

pub type SharedPolicy = Arc<RwLock<MockPolicy>>;

/// Deterministic scripted backend: output is a pure function of
/// `(seed, prompt text, nonce, attempt)` and the current policy.
pub struct ScriptedMockBackend {
    seed: u64,
    policy: SharedPolicy,
    label: String,
}

impl ScriptedMockBackend {
    pub fn new(seed: u64, policy: SharedPolicy, label: impl Into<String>) -> Self {
        Self { seed, policy, label: label.into() }
    }

    pub fn policy(&self) -> &SharedPolicy {
        &self.policy
    }

    fn rng_for(&self, prompt_text: &str, nonce: u64, attempt: u32) -> ChaCha8Rng {
        let mut h = self.seed ^ fnv1a64(prompt_text).rotate_left(17);
        h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ nonce.rotate_left(31) ^ u64::from(attempt).rotate_left(7);
        ChaCha8Rng::seed_from_u64(h)
    }

    /// Samples a completion for a raw prompt text.
    pub fn sample(&self, prompt_text: &str, nonce: u64, attempt: u32) -> String {
        let policy = self.policy.read().expect("mock policy lock poisoned");
        let mut rng = self.rng_for(prompt_text, nonce, attempt);
        let parents = parents_in_prompt(prompt_text);
        let children: Vec<String> = (0..MAX_PER_RESPONSE)
            .map(|_| match parents.as_slice() {
                [a, b, ..] => policy.sample_child(a, b, &mut rng),
                _ => policy.sample_free(&mut rng),
            })
            .collect();
        render_molecules(&children.iter().map(String::as_str).collect::<Vec<_>>())
    }

    /// Probability of one emitted molecule given the prompt text.
    pub fn molecule_probability(&self, prompt_text: &str, molecule: &str) -> f64 {
        let policy = self.policy.read().expect("mock policy lock poisoned");
        match parents_in_prompt(prompt_text).as_slice() {
            [a, b, ..] => policy.child_probability(a, b, molecule),
            _ => policy.free_probability(molecule),
        }
    }
}

impl ProposerBackend for ScriptedMockBackend {
    fn complete(&self, prompt: &PromptSpec, nonce: u64, attempt: u32) -> Result<String, ProposerError> {
        Ok(self.sample(&prompt.rendered_text, nonce, attempt))
    }

    fn supports_logprob(&self) -> bool {
        true
    }

    /// Sum of per-molecule log-probabilities. The completion must be the
    /// canonical rendering of its molecules (one `<mol>` line each, at most
    /// two); anything else, or a molecule outside the support, is `-inf`.
    fn sequence_logprob(&self, prompt_text: &str, completion: &str) -> Result<f64, ProposerError> {
        let parsed = parse_response(completion);
        let texts: Vec<&str> = parsed.genotypes.iter().map(|g| g.text()).collect();
        if texts.is_empty() || !parsed.warnings.is_empty() || render_molecules(&texts) != completion {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(texts.iter().map(|m| self.molecule_probability(prompt_text, m).ln()).sum())
    }

    fn model_ref(&self) -> Option<String> {
        Some(format!("{}@v{}", self.label, self.policy.read().expect("mock policy lock poisoned").version))
    }

    fn describe(&self) -> String {
        format!("scripted-mock:{} seed={}", self.label, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CandidateId, ScoreVector};
    use crate::objectives::ScorerBinding;

    fn cand(id: u64, text: &str) -> Candidate {
        Candidate {
            id: CandidateId(id),
            genotype: Genotype::new(text).unwrap(),
            scores: ScoreVector::sentinel(5),
            valid: true,
            proposer_id: "init".into(),
            parent_ids: vec![],
            generation: 0,
        }
    }

    fn builder() -> PromptBuilder {
        PromptBuilder::new(ScorerBinding::builtin_suite().specs(), &surrogate_briefs()).unwrap()
    }

    fn texts(p: &ParsedResponse) -> Vec<&str> {
        p.genotypes.iter().map(|g| g.text()).collect()
    }

    #[test]
    fn prompt_structure() {
        let p = builder().build_prompt(&cand(1, "CCO"), &cand(2, "c1ccccc1N"));
        let t = &p.rendered_text;
        assert!(t.contains("\n- CCO\n") && t.contains("\n- c1ccccc1N\n"));
        for (i, line) in ["1. increase the LENGTH value.", "2. increase the BALANCE value.", "3. increase the AMIDE value.", "4. decrease the BROMINE value.", "5. decrease the NESTING value."]
            .iter()
            .enumerate()
        {
            let pos = t.find(line).unwrap_or_else(|| panic!("missing directive {i}"));
            if i > 0 {
                assert!(pos > t.find(&format!("{}. ", i)).unwrap());
            }
        }
        assert!(t.ends_with("Answer with exactly two molecules and stop."));
        assert!(t.contains("start with <mol> and end with </mol>"));
        assert_eq!(parents_in_prompt(t), vec!["CCO".to_string(), "c1ccccc1N".to_string()]);
        assert_eq!(p.objective_briefs.len(), 5);
    }

    #[test]
    fn prompt_determinism_and_degenerate_pair() {
        let b = builder();
        let a = cand(1, "CCO");
        assert_eq!(b.build_prompt(&a, &a).rendered_text, b.build_prompt(&a, &a).rendered_text);
        assert_eq!(parents_in_prompt(&b.build_prompt(&a, &a).rendered_text), vec!["CCO", "CCO"]);
        assert!(parents_in_prompt(&b.build_seed_prompt().rendered_text).is_empty());
    }

    #[test]
    fn missing_brief_is_config_error() {
        let mut briefs = surrogate_briefs();
        briefs.remove("motifcount");
        assert_eq!(
            PromptBuilder::new(ScorerBinding::builtin_suite().specs(), &briefs).unwrap_err(),
            ProposerError::MissingBrief("motifcount".into())
        );
    }

    #[test]
    fn parse_examples() {
        assert_eq!(texts(&parse_response("<mol>CC</mol><mol>CO</mol>")), vec!["CC", "CO"]);
        assert!(parse_response("no tags here").genotypes.is_empty());
        let over = parse_response("<mol>A</mol>x<mol>B</mol>x<mol>C</mol>");
        assert_eq!(texts(&over), vec!["A", "B"]);
        assert_eq!(over.warnings.len(), 1);
        assert_eq!(texts(&parse_response("<mol>  CC \n</mol><mol></mol><mol>CC</mol>")), vec!["CC", "CC"]);
        let nested = parse_response("<mol><mol>CCN</mol></mol> junk </mol><mol>O");
        assert_eq!(texts(&nested), vec!["CCN"]);
        assert!(nested.warnings.len() >= 2);
        assert!(parse_response("<mol>C\nC</mol>").genotypes.is_empty());
    }

    struct Flaky {
        replies: Mutex<Vec<Result<String, ProposerError>>>,
    }

    impl ProposerBackend for Flaky {
        fn complete(&self, _: &PromptSpec, _: u64, _: u32) -> Result<String, ProposerError> {
            self.replies.lock().unwrap().remove(0)
        }
        fn describe(&self) -> String {
            "flaky".into()
        }
    }

    #[test]
    fn propose_retries_then_gives_up() {
        let prompt = builder().build_seed_prompt();
        let backend = Flaky {
            replies: Mutex::new(vec![
                Err(ProposerError::Transport("down".into())),
                Ok("prose only".into()),
                Ok("<mol>CC</mol>\n<mol>CO</mol>".into()),
            ]),
        };
        let binding = ProposerBinding::new("remote", 2, Arc::new(backend));
        let res = binding.propose(&prompt, 0).unwrap();
        assert_eq!(res.attempts, 3);
        assert_eq!(res.parsed.len(), 2);
        assert!(res.parse_errors.is_empty());

        let prose = Flaky { replies: Mutex::new(vec![Ok("I cannot".into()), Ok("still no".into())]) };
        let binding = ProposerBinding::new("remote", 1, Arc::new(prose));
        assert!(matches!(binding.propose(&prompt, 0), Err(ProposerError::ProposerUnavailable { attempts: 2, .. })));
        assert!(matches!(binding.sequence_logprob("x", "y"), Err(ProposerError::Capability(_))));
    }

    fn mock(seed: u64) -> ScriptedMockBackend {
        ScriptedMockBackend::new(seed, Arc::new(RwLock::new(MockPolicy::default())), "local")
    }

    #[test]
    fn mock_is_deterministic() {
        let prompt = builder().build_prompt(&cand(1, "CC(=O)NC"), &cand(2, "c1ccccc1CO"));
        let binding = ProposerBinding::new("local", 0, Arc::new(mock(9)));
        let a = binding.propose(&prompt, 4).unwrap();
        assert_eq!(a, binding.propose(&prompt, 4).unwrap());
        assert_eq!(a.parsed.len(), 2);
        assert!(a.logprob.unwrap().is_finite());
    }

    #[test]
    fn cut_points_respect_brackets() {
        assert_eq!(prefix_cuts("CC(C)O"), vec![0, 1, 2, 5, 6]);
        assert_eq!(suffix_cuts("CC(C)O"), vec![0, 1, 2, 5, 6]);
        assert_eq!(prefix_cuts("ClC"), vec![0, 2, 3]);
    }

    /// Enumerates every path of the generative program and adds up the mass
    /// landing on each distinct output text.
    fn enumerate_child_distribution(policy: &MockPolicy, a: &str, b: &str) -> HashMap<String, f64> {
        let mut dist: HashMap<String, f64> = HashMap::new();
        let cuts_a = prefix_cuts(a);
        let cuts_b = suffix_cuts(b);
        let total_w: f64 = policy.units.iter().map(|u| u.weight).sum();
        for &i in &cuts_a {
            for &j in &cuts_b {
                let pw = 1.0 / (cuts_a.len() * cuts_b.len()) as f64;
                let x = format!("{}{}", &a[..i], &b[j..]);
                *dist.entry(x.clone()).or_default() += pw * (1.0 - policy.mutation_rate);
                let bounds = token_boundaries(&x);
                for &pos in &bounds {
                    for u in &policy.units {
                        let mut y = x.clone();
                        y.insert_str(pos, &u.text);
                        *dist.entry(y).or_default() +=
                            pw * policy.mutation_rate / bounds.len() as f64 * u.weight / total_w;
                    }
                }
            }
        }
        dist
    }

    #[test]
    fn child_probability_matches_enumeration() {
        let policy = MockPolicy::default();
        let (a, b) = ("CC(=O)NC", "ClCO");
        let dist = enumerate_child_distribution(&policy, a, b);
        let mass: f64 = dist.values().sum();
        assert!((mass - 1.0).abs() < 1e-12);
        for (text, p) in &dist {
            let got = policy.child_probability(a, b, text);
            assert!((got - p).abs() < 1e-12, "{text}: {got} vs {p}");
        }
        assert_eq!(policy.child_probability(a, b, "XYZ"), 0.0);
    }

    #[test]
    fn free_probability_matches_enumeration() {
        let policy = MockPolicy {
            units: vec![
                MockUnit { text: "C".into(), weight: 2.0 },
                MockUnit { text: "CC".into(), weight: 1.0 },
                MockUnit { text: "O".into(), weight: 1.0 },
            ],
            mutation_rate: 0.0,
            min_units: 1,
            max_units: 3,
            version: 0,
        };
        let mut dist: HashMap<String, f64> = HashMap::new();
        let w = [("C", 0.5), ("CC", 0.25), ("O", 0.25)];
        for n in 1..=3usize {
            let mut seqs: Vec<(String, f64)> = vec![(String::new(), 1.0 / 3.0)];
            for _ in 0..n {
                seqs = seqs.iter().flat_map(|(s, p)| w.iter().map(move |(u, q)| (format!("{s}{u}"), p * q))).collect();
            }
            for (s, p) in seqs {
                *dist.entry(s).or_default() += p;
            }
        }
        for (text, p) in &dist {
            assert!((policy.free_probability(text) - p).abs() < 1e-12, "{text}");
        }
        assert_eq!(policy.free_probability("N"), 0.0);
    }

    #[test]
    fn mock_logprob_support() {
        let prompt = builder().build_prompt(&cand(1, "CC(=O)NC"), &cand(2, "c1ccccc1CO"));
        let m = mock(3);
        let sample = m.sample(&prompt.rendered_text, 0, 0);
        let lp = m.sequence_logprob(&prompt.rendered_text, &sample).unwrap();
        assert!(lp.is_finite() && lp <= 0.0);
        assert_eq!(lp, m.sequence_logprob(&prompt.rendered_text, &sample).unwrap());
        assert_eq!(m.sequence_logprob(&prompt.rendered_text, "<mol>XYZQ</mol>").unwrap(), f64::NEG_INFINITY);
        assert_eq!(m.sequence_logprob(&prompt.rendered_text, "garbage").unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn mock_script_parsing() {
        let text = r#"
mutation_rate = 0.5
min_units = 2
max_units = 4
units = [ { text = "C", weight = 1.0 }, { text = "XY", weight = 0.5 } ]
"#;
        let p = MockPolicy::from_toml(text).unwrap();
        assert_eq!(p.units.len(), 2);
        assert!(MockPolicy::from_toml("mutation_rate = 2.0\nmin_units = 1\nmax_units = 1\nunits = []").is_err());
    }
}
