//! Seedable information-acquisition simulator.
//!
//! One run models an agent that repeatedly (1) picks a search query, (2)
//! receives that query's fixed document, (3) compresses the document into a
//! summary of facts, and (4) updates a belief bit-vector over a finite fact
//! universe. Three policies drive the loop (query selection, summary
//! inclusion, belief update), each a softmax over fixed logits with its own
//! per-step temperature. Temperature zero means argmax, so a run with all
//! temperatures at zero is fully deterministic; raising one module's
//! temperature at one step injects variance exactly there.
//!
//! Everything is a pure function of `(WorldSpec, PolicyConfig, seed)`. Runs
//! within an ensemble use independent generators seeded by `base_seed ^ run`,
//! and ensembles collect in run order, so outputs never depend on thread
//! scheduling.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Level, OutputVector, TvResult};
use crate::par::{map_indexed, map_indexed_seq};

/// Added to the query logit of any document whose facts are all believed.
pub const COVERAGE_PENALTY: f64 = -2.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("empty action set")]
    EmptyActionSet,
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// A query's fixed retrieval result: the fact indices it supports plus inert
/// distractor tokens that carry no belief content.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Document {
    pub facts: Vec<usize>,
    #[serde(default)]
    pub distractors: Vec<String>,
}

/// Deterministic map from the final belief to an answer label.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerRule {
    /// Label is the bit pattern of the selected facts, e.g. "1010".
    KeyFactSignature { key_facts: Vec<usize> },
    /// Label buckets the total number of believed facts.
    SupportBucket { bucket_size: usize },
}

impl AnswerRule {
    pub fn answer(&self, belief: u64) -> String {
        match self {
            AnswerRule::KeyFactSignature { key_facts } => key_facts
                .iter()
                .map(|&f| if belief >> f & 1 == 1 { '1' } else { '0' })
                .collect(),
            AnswerRule::SupportBucket { bucket_size } => {
                let count = belief.count_ones() as usize;
                format!("bucket-{}", count / bucket_size.max(&1usize))
            }
        }
    }
}

/// A closed world: fact universe, one fixed document per query, a horizon,
/// and an answer rule. The environment is deterministic by construction;
/// all stochasticity comes from the policies.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorldSpec {
    pub n_findings: usize,
    pub queries: Vec<Document>,
    pub answer_rule: AnswerRule,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_horizon() -> usize {
    3
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_findings == 0 || self.n_findings > 64 {
            return Err(SimError::InvalidWorld(format!(
                "n_findings must be in 1..=64, got {}",
                self.n_findings
            )));
        }
        if self.queries.is_empty() {
            return Err(SimError::InvalidWorld("no queries".into()));
        }
        if self.horizon == 0 {
            return Err(SimError::InvalidWorld("horizon must be >= 1".into()));
        }
        for (q, doc) in self.queries.iter().enumerate() {
            for &f in &doc.facts {
                if f >= self.n_findings {
                    return Err(SimError::InvalidWorld(format!(
                        "query {q} references fact {f} outside universe of {}",
                        self.n_findings
                    )));
                }
            }
        }
        match &self.answer_rule {
            AnswerRule::KeyFactSignature { key_facts } => {
                for &f in key_facts {
                    if f >= self.n_findings {
                        return Err(SimError::InvalidWorld(format!(
                            "answer rule references fact {f} outside universe"
                        )));
                    }
                }
            }
            AnswerRule::SupportBucket { bucket_size } => {
                if *bucket_size == 0 {
                    return Err(SimError::InvalidWorld("bucket_size must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Mask of a document's facts.
    pub(crate) fn doc_mask(&self, query: usize) -> u64 {
        self.queries[query]
            .facts
            .iter()
            .fold(0u64, |m, &f| m | 1 << f)
    }

    /// Reference world used throughout the experiment suite: 32 facts,
    /// 8 queries, horizon 3. The third document on the greedy path is much
    /// larger than the first two, so losing it to an early wasted step costs
    /// more than late per-fact noise.
    pub fn reference() -> WorldSpec {
        let doc = |facts: Vec<usize>, tag: &str| Document {
            facts,
            distractors: vec![format!("noise-{tag}")],
        };
        WorldSpec {
            n_findings: 32,
            queries: vec![
                doc(vec![0, 1], "a"),
                doc(vec![2, 3], "b"),
                doc((4..20).collect(), "c"),
                doc(vec![20, 21], "d"),
                doc(vec![22, 23], "e"),
                doc(vec![24, 25], "f"),
                doc(vec![26, 27], "g"),
                doc(vec![28, 29, 30, 31], "h"),
            ],
            answer_rule: AnswerRule::KeyFactSignature {
                key_facts: vec![0, 2, 4, 20],
            },
            horizon: 3,
        }
    }

    /// Tiny world small enough for exhaustive enumeration: 4 facts,
    /// 2 overlapping queries, horizon 2.
    pub fn tiny_reference() -> WorldSpec {
        WorldSpec {
            n_findings: 4,
            queries: vec![
                Document {
                    facts: vec![0, 1],
                    distractors: vec![],
                },
                Document {
                    facts: vec![1, 2, 3],
                    distractors: vec![],
                },
            ],
            answer_rule: AnswerRule::KeyFactSignature {
                key_facts: vec![0, 2],
            },
            horizon: 2,
        }
    }
}

/// The three stochastic stages of one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Query,
    Sum,
    Update,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Query, Module::Sum, Module::Update];
}

impl std::fmt::Display for Module {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Module::Query => write!(f, "query"),
            Module::Sum => write!(f, "sum"),
            Module::Update => write!(f, "update"),
        }
    }
}

impl std::str::FromStr for Module {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "query" => Ok(Module::Query),
            "sum" => Ok(Module::Sum),
            "update" => Ok(Module::Update),
            other => Err(format!("unknown module '{other}'")),
        }
    }
}

/// Where a temperature is injected: one step (1-based) or every step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepSelector {
    At(usize),
    Combined,
}

impl std::fmt::Display for StepSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepSelector::At(s) => write!(f, "{s}"),
            StepSelector::Combined => write!(f, "combined"),
        }
    }
}

impl std::str::FromStr for StepSelector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("combined") {
            return Ok(StepSelector::Combined);
        }
        s.parse::<usize>()
            .map(StepSelector::At)
            .map_err(|_| format!("unknown step selector '{s}'"))
    }
}

/// Per-module, per-step temperatures. Index 0 is step 1.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TemperatureSchedule {
    pub query: Vec<f64>,
    pub sum: Vec<f64>,
    pub update: Vec<f64>,
}

impl TemperatureSchedule {
    pub fn zeros(horizon: usize) -> Self {
        Self {
            query: vec![0.0; horizon],
            sum: vec![0.0; horizon],
            update: vec![0.0; horizon],
        }
    }

    pub fn constant(horizon: usize, lambda: f64) -> Self {
        Self {
            query: vec![lambda; horizon],
            sum: vec![lambda; horizon],
            update: vec![lambda; horizon],
        }
    }

    fn module_mut(&mut self, module: Module) -> &mut Vec<f64> {
        match module {
            Module::Query => &mut self.query,
            Module::Sum => &mut self.sum,
            Module::Update => &mut self.update,
        }
    }

    /// Sets one cell of the schedule; `Combined` covers every step.
    pub fn set(&mut self, module: Module, step: StepSelector, lambda: f64) {
        let slots = self.module_mut(module);
        match step {
            StepSelector::At(s) => {
                assert!(s >= 1 && s <= slots.len(), "step {s} outside schedule");
                slots[s - 1] = lambda;
            }
            StepSelector::Combined => slots.iter_mut().for_each(|v| *v = lambda),
        }
    }

    /// Temperature of `module` at 0-based step `t` (0 beyond the schedule).
    pub fn get(&self, module: Module, t: usize) -> f64 {
        let slots = match module {
            Module::Query => &self.query,
            Module::Sum => &self.sum,
            Module::Update => &self.update,
        };
        slots.get(t).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for slots in [&self.query, &self.sum, &self.update] {
            for &v in slots {
                if !v.is_finite() || v < 0.0 {
                    return Err(SimError::InvalidPolicy(format!(
                        "temperature {v} must be finite and >= 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fixed policy logits plus the temperature schedule and base seed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PolicyConfig {
    /// One logit per query.
    pub query_logits: Vec<f64>,
    /// One summary-inclusion logit per fact; index 0 of `[logit, 0]` means
    /// "include", so nonnegative logits include deterministically at λ = 0.
    pub include_logits: Vec<f64>,
    /// One update-failure logit per fact; index 0 of `[logit, 0]` means
    /// "fail to set", so negative logits set reliably at λ = 0.
    pub flip_logits: Vec<f64>,
    pub temperatures: TemperatureSchedule,
    pub seed: u64,
}

impl PolicyConfig {
    /// All-deterministic policy for a world: descending query preference,
    /// include logit +1 and flip logit −1 on every fact.
    pub fn deterministic_for(world: &WorldSpec, seed: u64) -> Self {
        let q = world.queries.len();
        Self {
            query_logits: (0..q).map(|i| 3.0 - 0.2 * i as f64).collect(),
            include_logits: vec![1.0; world.n_findings],
            flip_logits: vec![-1.0; world.n_findings],
            temperatures: TemperatureSchedule::zeros(world.horizon),
            seed,
        }
    }

    /// Companion policy for [`WorldSpec::reference`].
    pub fn reference(seed: u64) -> Self {
        let world = WorldSpec::reference();
        Self::deterministic_for(&world, seed)
    }

    /// Companion policy for [`WorldSpec::tiny_reference`].
    pub fn tiny_reference(seed: u64) -> Self {
        let world = WorldSpec::tiny_reference();
        let mut cfg = Self::deterministic_for(&world, seed);
        cfg.query_logits = vec![1.0, 0.8];
        cfg
    }

    pub fn validate_for(&self, world: &WorldSpec) -> Result<(), SimError> {
        if self.query_logits.len() != world.queries.len() {
            return Err(SimError::InvalidPolicy(format!(
                "query_logits length {} != {} queries",
                self.query_logits.len(),
                world.queries.len()
            )));
        }
        if self.include_logits.len() != world.n_findings
            || self.flip_logits.len() != world.n_findings
        {
            return Err(SimError::InvalidPolicy(format!(
                "per-fact logit lengths ({}, {}) != universe size {}",
                self.include_logits.len(),
                self.flip_logits.len(),
                world.n_findings
            )));
        }
        for &l in self
            .query_logits
            .iter()
            .chain(&self.include_logits)
            .chain(&self.flip_logits)
        {
            if !l.is_finite() {
                return Err(SimError::InvalidPolicy(format!("non-finite logit {l}")));
            }
        }
        self.temperatures.validate()
    }

    /// Copy with all temperatures zeroed.
    pub fn with_zero_temperatures(&self, horizon: usize) -> Self {
        let mut cfg = self.clone();
        cfg.temperatures = TemperatureSchedule::zeros(horizon);
        cfg
    }
}

/// Softmax probabilities at temperature `lambda`; λ = 0 collapses onto the
/// argmax with lowest-index tie-break.
pub(crate) fn softmax_probs(logits: &[f64], lambda: f64) -> Vec<f64> {
    assert!(!logits.is_empty());
    if lambda == 0.0 {
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate().skip(1) {
            if l > logits[best] {
                best = i;
            }
        }
        let mut probs = vec![0.0; logits.len()];
        probs[best] = 1.0;
        return probs;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / lambda).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Probability that a tempered two-way choice `[logit, 0]` lands on index 0.
pub(crate) fn binary_prob_index0(logit: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        if logit >= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 / (1.0 + (-logit / lambda).exp())
    }
}

/// Samples an index from `softmax(logits / λ)`. λ = 0 is argmax with
/// lowest-index tie-break and consumes no randomness.
pub fn tempered_sample<R: Rng>(
    logits: &[f64],
    lambda: f64,
    rng: &mut R,
) -> Result<usize, SimError> {
    if logits.is_empty() {
        return Err(SimError::EmptyActionSet);
    }
    debug_assert!(lambda >= 0.0 && lambda.is_finite());
    debug_assert!(logits.iter().all(|l| l.is_finite()));
    if lambda == 0.0 {
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate().skip(1) {
            if l > logits[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    let probs = softmax_probs(logits, lambda);
    let draw: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cumulative += p;
        if draw < cumulative {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

/// Query logits adjusted by the coverage penalty for the current belief.
pub(crate) fn adjusted_query_logits(world: &WorldSpec, cfg: &PolicyConfig, belief: u64) -> Vec<f64> {
    world
        .queries
        .iter()
        .enumerate()
        .map(|(q, _)| {
            let mask = world.doc_mask(q);
            let covered = mask != 0 && belief & mask == mask;
            cfg.query_logits[q] + if covered { COVERAGE_PENALTY } else { 0.0 }
        })
        .collect()
}

/// One action of the trajectory. STOP never fires before the horizon in this
/// version; it exists so serialized trajectories have a stable schema.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Query(usize),
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub action: Action,
    /// Retrieved document id (same as the query id; retrieval is fixed).
    pub observation: usize,
    /// Facts kept by the summary stage, ascending.
    pub summary: Vec<usize>,
    pub next_belief: u64,
}

pub(crate) fn choose_query<R: Rng>(
    world: &WorldSpec,
    cfg: &PolicyConfig,
    belief: u64,
    t: usize,
    rng: &mut R,
) -> usize {
    let logits = adjusted_query_logits(world, cfg, belief);
    tempered_sample(&logits, cfg.temperatures.get(Module::Query, t), rng)
        .expect("validated world has at least one query")
}

/// Tempered inclusion draws over a document's facts, in ascending fact
/// order.
pub(crate) fn sample_summary<R: Rng>(
    world: &WorldSpec,
    cfg: &PolicyConfig,
    query: usize,
    lambda_sum: f64,
    rng: &mut R,
) -> Vec<usize> {
    let doc = &world.queries[query];
    let mut summary = Vec::new();
    for &fact in &doc.facts {
        let pick = tempered_sample(&[cfg.include_logits[fact], 0.0], lambda_sum, rng)
            .expect("two-way choice");
        if pick == 0 {
            summary.push(fact);
        }
    }
    summary
}

/// Tempered per-fact update draws; evidence can fail to land but bits only
/// ever accrue.
pub(crate) fn apply_update<R: Rng>(
    cfg: &PolicyConfig,
    belief: u64,
    summary: &[usize],
    lambda_update: f64,
    rng: &mut R,
) -> u64 {
    let mut next_belief = belief;
    for &fact in summary {
        let pick = tempered_sample(&[cfg.flip_logits[fact], 0.0], lambda_update, rng)
            .expect("two-way choice");
        if pick == 1 {
            next_belief |= 1 << fact;
        }
    }
    next_belief
}

/// Runs the summary and update stages for a chosen query, with explicit
/// temperatures so mitigation can scale them.
pub(crate) fn complete_step<R: Rng>(
    world: &WorldSpec,
    cfg: &PolicyConfig,
    belief: u64,
    query: usize,
    lambda_sum: f64,
    lambda_update: f64,
    rng: &mut R,
) -> StepOutcome {
    let summary = sample_summary(world, cfg, query, lambda_sum, rng);
    let next_belief = apply_update(cfg, belief, &summary, lambda_update, rng);
    StepOutcome {
        action: Action::Query(query),
        observation: query,
        summary,
        next_belief,
    }
}

/// Advances one step: query choice, fixed retrieval, tempered summary, and
/// tempered belief update.
pub fn step<R: Rng>(
    world: &WorldSpec,
    belief: u64,
    t: usize,
    cfg: &PolicyConfig,
    rng: &mut R,
) -> StepOutcome {
    debug_assert!(t < world.horizon, "step {t} beyond horizon {}", world.horizon);
    let query = choose_query(world, cfg, belief, t, rng);
    complete_step(
        world,
        cfg,
        belief,
        query,
        cfg.temperatures.get(Module::Sum, t),
        cfg.temperatures.get(Module::Update, t),
        rng,
    )
}

/// Everything observed in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub run_id: usize,
    pub seed: u64,
    /// Belief masks b_0..b_T.
    pub beliefs: Vec<u64>,
    pub actions: Vec<Action>,
    pub observations: Vec<usize>,
    pub summaries: Vec<Vec<usize>>,
    /// Distinct documents retrieved over the run.
    pub citations: BTreeSet<usize>,
    pub answer: String,
}

impl TrajectoryRecord {
    pub fn final_belief(&self) -> u64 {
        *self.beliefs.last().expect("beliefs never empty")
    }
}

fn run_with_rng(world: &WorldSpec, cfg: &PolicyConfig, run_id: usize, seed: u64) -> TrajectoryRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut beliefs = vec![0u64];
    let mut actions = Vec::new();
    let mut observations = Vec::new();
    let mut summaries = Vec::new();
    let mut citations = BTreeSet::new();
    let mut belief = 0u64;
    for t in 0..world.horizon {
        let outcome = step(world, belief, t, cfg, &mut rng);
        belief = outcome.next_belief;
        beliefs.push(belief);
        citations.insert(outcome.observation);
        actions.push(outcome.action);
        observations.push(outcome.observation);
        summaries.push(outcome.summary);
    }
    TrajectoryRecord {
        run_id,
        seed,
        beliefs,
        actions,
        observations,
        summaries,
        citations,
        answer: world.answer_rule.answer(belief),
    }
}

/// One seeded run from the empty belief.
pub fn run_one(world: &WorldSpec, cfg: &PolicyConfig, seed: u64) -> TrajectoryRecord {
    run_with_rng(world, cfg, 0, seed)
}

/// `n_runs` independent runs; run `i` is seeded with `base_seed ^ i` so any
/// alternate implementation can reproduce the ensemble exactly.
pub fn run_ensemble(
    world: &WorldSpec,
    cfg: &PolicyConfig,
    n_runs: usize,
    base_seed: u64,
) -> Vec<TrajectoryRecord> {
    map_indexed(n_runs, |i| run_with_rng(world, cfg, i, base_seed ^ i as u64))
}

/// Sequential kernel behind [`run_ensemble`], exposed for the benchmark
/// suite.
pub fn run_ensemble_seq(
    world: &WorldSpec,
    cfg: &PolicyConfig,
    n_runs: usize,
    base_seed: u64,
) -> Vec<TrajectoryRecord> {
    map_indexed_seq(n_runs, |i| run_with_rng(world, cfg, i, base_seed ^ i as u64))
}

/// Output vectors for one ensemble at all three levels.
///
/// Findings use the full fact universe and citations the full query set as
/// canonical spaces (the simulator knows both); answers are one-hot over the
/// distinct labels observed, in first-appearance order. Appending never-set
/// dimensions does not change any pairwise distance, so these vectors give
/// the same variance estimates as cross-run-union spaces.
#[derive(Clone, Debug)]
pub struct EnsembleVectors {
    pub answers: Vec<OutputVector>,
    pub findings: Vec<OutputVector>,
    pub citations: Vec<OutputVector>,
    pub answer_labels: Vec<String>,
}

pub fn vectorize(world: &WorldSpec, runs: &[TrajectoryRecord]) -> EnsembleVectors {
    let mut labels: Vec<String> = Vec::new();
    let mut answer_ids = Vec::with_capacity(runs.len());
    for run in runs {
        let id = match labels.iter().position(|l| l == &run.answer) {
            Some(id) => id,
            None => {
                labels.push(run.answer.clone());
                labels.len() - 1
            }
        };
        answer_ids.push(id);
    }
    let answer_dim = labels.len().max(1);
    let answers = answer_ids
        .iter()
        .map(|&id| OutputVector::answer(id, answer_dim).expect("id within dim"))
        .collect();
    let findings = runs
        .iter()
        .map(|run| {
            let belief = run.final_belief();
            let members = (0..world.n_findings).filter(|&f| belief >> f & 1 == 1);
            OutputVector::binary(Level::Finding, members, world.n_findings).expect("facts in range")
        })
        .collect();
    let citations = runs
        .iter()
        .map(|run| {
            OutputVector::binary(
                Level::Citation,
                run.citations.iter().copied(),
                world.queries.len(),
            )
            .expect("doc ids in range")
        })
        .collect();
    EnsembleVectors {
        answers,
        findings,
        citations,
        answer_labels: labels,
    }
}

/// Per-level variance statistics plus counts for one ensemble.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub answer: TvResult,
    pub finding: TvResult,
    pub citation: TvResult,
    /// Fraction of runs whose answer matches the all-deterministic run.
    pub accuracy: f64,
}

pub fn ensemble_stats(
    world: &WorldSpec,
    cfg: &PolicyConfig,
    runs: &[TrajectoryRecord],
) -> EnsembleStats {
    let vectors = vectorize(world, runs);
    let reference_answer = run_one(world, &cfg.with_zero_temperatures(world.horizon), 0).answer;
    let accuracy = runs
        .iter()
        .filter(|r| r.answer == reference_answer)
        .count() as f64
        / runs.len() as f64;
    EnsembleStats {
        answer: TvResult::from_vectors(&vectors.answers).expect("n >= 2"),
        finding: TvResult::from_vectors(&vectors.findings).expect("n >= 2"),
        citation: TvResult::from_vectors(&vectors.citations).expect("n >= 2"),
        accuracy,
    }
}

/// One ablation cell: a single (module, step, λ) injection.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub lambda: f64,
    pub step: StepSelector,
    pub module: Module,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AblationCell,
    pub stats: EnsembleStats,
}

/// SplitMix64 finalizer, used to derive independent seed streams.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Runs every (λ, step, module) cell: the cell's temperature is set, all
/// others stay at zero, and `n_runs` trajectories produce the cell's
/// statistics. Rows come out in λ-major, then step, then module order.
pub fn ablation_grid(
    world: &WorldSpec,
    base_cfg: &PolicyConfig,
    modules: &[Module],
    steps: &[StepSelector],
    lambdas: &[f64],
    n_runs: usize,
) -> Vec<CellResult> {
    let mut cells = Vec::new();
    for &lambda in lambdas {
        for &step in steps {
            for &module in modules {
                cells.push(AblationCell {
                    lambda,
                    step,
                    module,
                });
            }
        }
    }
    map_indexed(cells.len(), |i| {
        let cell = cells[i];
        let mut cfg = base_cfg.with_zero_temperatures(world.horizon);
        cfg.temperatures.set(cell.module, cell.step, cell.lambda);
        let seed = derive_seed(base_cfg.seed, i as u64 + 1);
        let runs = run_ensemble_seq(world, &cfg, n_runs, seed);
        CellResult {
            cell,
            stats: ensemble_stats(world, &cfg, &runs),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (WorldSpec, PolicyConfig) {
        let world = WorldSpec::tiny_reference();
        let cfg = PolicyConfig::tiny_reference(7);
        (world, cfg)
    }

    #[test]
    fn reference_worlds_validate() {
        let world = WorldSpec::reference();
        world.validate().unwrap();
        PolicyConfig::reference(0).validate_for(&world).unwrap();
        let tiny = WorldSpec::tiny_reference();
        tiny.validate().unwrap();
        PolicyConfig::tiny_reference(0).validate_for(&tiny).unwrap();
    }

    #[test]
    fn tempered_sample_argmax_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(tempered_sample(&[3.0, 1.0, 0.0], 0.0, &mut rng).unwrap(), 0);
        // Tie breaks to the lowest index.
        assert_eq!(tempered_sample(&[2.0, 2.0, 1.0], 0.0, &mut rng).unwrap(), 0);
        assert!(matches!(
            tempered_sample(&[], 1.0, &mut rng),
            Err(SimError::EmptyActionSet)
        ));
    }

    #[test]
    fn tempered_sample_symmetric_logits_are_even() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let zeros = (0..n)
            .filter(|_| tempered_sample(&[1.0, 1.0], 0.7, &mut rng).unwrap() == 0)
            .count();
        let p = zeros as f64 / n as f64;
        // 3σ band around 0.5 at n = 20k.
        assert!((p - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt(), "p = {p}");
    }

    #[test]
    fn tempered_sample_matches_softmax_frequencies() {
        let logits = [2.0, 1.0, 0.0];
        let lambda = 1.0;
        let expected = softmax_probs(&logits, lambda);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[tempered_sample(&logits, lambda, &mut rng).unwrap()] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = c as f64 / n as f64;
            let sigma = (expected[i] * (1.0 - expected[i]) / n as f64).sqrt();
            assert!(
                (p - expected[i]).abs() < 3.0 * sigma,
                "index {i}: {p} vs {}",
                expected[i]
            );
        }
    }

    #[test]
    fn zero_temperature_runs_are_identical() {
        let (world, cfg) = tiny();
        let runs = run_ensemble(&world, &cfg, 10, 99);
        for r in &runs[1..] {
            assert_eq!(r.beliefs, runs[0].beliefs);
            assert_eq!(r.actions, runs[0].actions);
            assert_eq!(r.answer, runs[0].answer);
        }
        let stats = ensemble_stats(&world, &cfg, &runs);
        assert_eq!(stats.answer.tv, 0.0);
        assert_eq!(stats.finding.tv, 0.0);
        assert_eq!(stats.citation.tv, 0.0);
        assert_eq!(stats.accuracy, 1.0);
    }

    #[test]
    fn same_base_seed_reproduces_ensembles_exactly() {
        let world = WorldSpec::reference();
        let mut cfg = PolicyConfig::reference(5);
        cfg.temperatures = TemperatureSchedule::constant(world.horizon, 1.0);
        let a = run_ensemble(&world, &cfg, 16, 1234);
        let b = run_ensemble(&world, &cfg, 16, 1234);
        assert_eq!(a, b);
        let a_json = serde_json::to_string(&a).unwrap();
        let b_json = serde_json::to_string(&b).unwrap();
        assert_eq!(a_json, b_json);
        // Parallel and sequential ensembles agree bit-for-bit.
        let c = run_ensemble_seq(&world, &cfg, 16, 1234);
        assert_eq!(a, c);
    }

    #[test]
    fn single_stochastic_stage_only_diverges_downstream_of_it() {
        let world = WorldSpec::reference();
        let mut cfg = PolicyConfig::reference(0);
        cfg.temperatures.set(Module::Query, StepSelector::At(1), 1.0);
        let runs = run_ensemble(&world, &cfg, 64, 42);
        for r in &runs {
            // Step 1 queries may differ, but each run stays internally
            // deterministic afterwards: summaries equal full documents.
            for (t, summary) in r.summaries.iter().enumerate() {
                let doc = &world.queries[r.observations[t]];
                assert_eq!(summary, &doc.facts);
            }
        }
        let first_queries: BTreeSet<usize> = runs.iter().map(|r| r.observations[0]).collect();
        assert!(first_queries.len() > 1, "step-1 query should vary");
    }

    #[test]
    fn belief_bits_never_clear() {
        let world = WorldSpec::reference();
        let mut cfg = PolicyConfig::reference(0);
        cfg.temperatures = TemperatureSchedule::constant(world.horizon, 1.0);
        for r in run_ensemble(&world, &cfg, 50, 7) {
            for w in r.beliefs.windows(2) {
                assert_eq!(w[0] & !w[1], 0, "belief lost a bit: {:b} -> {:b}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn nonzero_update_temperature_produces_finding_variance() {
        let (world, mut cfg) = tiny();
        cfg.temperatures.set(Module::Update, StepSelector::Combined, 1.0);
        let runs = run_ensemble(&world, &cfg, 10, 3);
        let stats = ensemble_stats(&world, &cfg, &runs);
        assert!(stats.finding.tv > 0.0);
    }

    #[test]
    fn ablation_grid_shape_and_zero_cells() {
        let (world, cfg) = tiny();
        let cells = ablation_grid(
            &world,
            &cfg,
            &Module::ALL,
            &[
                StepSelector::At(1),
                StepSelector::At(2),
                StepSelector::Combined,
            ],
            &[0.0, 1.0],
            8,
        );
        assert_eq!(cells.len(), 18);
        for c in cells.iter().filter(|c| c.cell.lambda == 0.0) {
            assert_eq!(c.stats.finding.tv, 0.0);
            assert_eq!(c.stats.answer.tv, 0.0);
            assert_eq!(c.stats.citation.tv, 0.0);
        }
    }

    #[test]
    fn invalid_worlds_are_rejected() {
        let mut world = WorldSpec::tiny_reference();
        world.n_findings = 0;
        assert!(world.validate().is_err());
        let mut world = WorldSpec::tiny_reference();
        world.queries[0].facts.push(99);
        assert!(world.validate().is_err());
        let world = WorldSpec::tiny_reference();
        let mut cfg = PolicyConfig::tiny_reference(0);
        cfg.query_logits.pop();
        assert!(cfg.validate_for(&world).is_err());
    }

    #[test]
    fn answer_rules_are_deterministic_maps() {
        let rule = AnswerRule::KeyFactSignature {
            key_facts: vec![0, 2],
        };
        assert_eq!(rule.answer(0b0101), "11");
        assert_eq!(rule.answer(0b0001), "10");
        let rule = AnswerRule::SupportBucket { bucket_size: 2 };
        assert_eq!(rule.answer(0b0111), "bucket-1");
    }
}
