//! Variance-mitigation strategies.
//!
//! Two mechanisms ship. Structured output: stage outputs must conform to a
//! closed, versioned schema ([`validate_structured`]); in the simulator the
//! reduced output entropy is modelled as a temperature multiplier γ on the
//! summary and update stages. Consensus queries: several independent query
//! proposals are intersected and only agreed-on queries proceed
//! ([`intersect_queries`]), with the ensemble size decaying to 1 over steps.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::map_indexed;
use crate::sim::{
    self, choose_query, complete_step, tempered_sample, Module, PolicyConfig, StepOutcome,
    TrajectoryRecord, WorldSpec,
};

#[derive(Debug, Error)]
pub enum MitigateError {
    #[error("schema violation at {path}: {detail}")]
    SchemaViolation { path: String, detail: String },
    #[error("no query proposals")]
    NoProposals,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    String,
    StringArray,
    Number,
    Bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub ty: FieldType,
    pub required: bool,
}

impl FieldSpec {
    pub fn required(name: &str, ty: FieldType) -> Self {
        Self {
            name: name.to_string(),
            ty,
            required: true,
        }
    }

    pub fn optional(name: &str, ty: FieldType) -> Self {
        Self {
            name: name.to_string(),
            ty,
            required: false,
        }
    }
}

/// Top-level shape of a structured payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaShape {
    Object,
    ArrayOfObjects,
    ArrayOfStrings,
}

/// A closed, versioned schema: unknown fields are rejected and edits require
/// a version bump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemaDescriptor {
    pub name: String,
    pub version: String,
    pub shape: SchemaShape,
    pub fields: Vec<FieldSpec>,
}

impl SchemaDescriptor {
    pub fn object(name: &str, version: &str, fields: Vec<FieldSpec>) -> Self {
        Self {
            name: name.to_string(),
            version: version.to_string(),
            shape: SchemaShape::Object,
            fields,
        }
    }

    pub fn array_of_objects(name: &str, version: &str, fields: Vec<FieldSpec>) -> Self {
        Self {
            name: name.to_string(),
            version: version.to_string(),
            shape: SchemaShape::ArrayOfObjects,
            fields,
        }
    }

    pub fn array_of_strings(name: &str, version: &str) -> Self {
        Self {
            name: name.to_string(),
            version: version.to_string(),
            shape: SchemaShape::ArrayOfStrings,
            fields: Vec::new(),
        }
    }

    /// Built-in schema for structured reasoning output.
    pub fn reasoning_v1() -> Self {
        Self::object(
            "reasoning",
            "v1",
            vec![
                FieldSpec::required("established_facts", FieldType::StringArray),
                FieldSpec::required("open_questions", FieldType::StringArray),
                FieldSpec::required("next_search_directions", FieldType::StringArray),
                FieldSpec::required("contradictions_or_uncertainties", FieldType::StringArray),
            ],
        )
    }
}

fn type_matches(value: &serde_json::Value, ty: FieldType) -> bool {
    match ty {
        FieldType::String => value.is_string(),
        FieldType::StringArray => value
            .as_array()
            .map(|a| a.iter().all(|v| v.is_string()))
            .unwrap_or(false),
        FieldType::Number => value.is_number(),
        FieldType::Bool => value.is_boolean(),
    }
}

/// Validates a parsed object against a closed field list. Returns the path
/// and a description of the first violation, in field-list order followed by
/// unknown keys in lexical order.
pub(crate) fn validate_object(
    value: &serde_json::Value,
    fields: &[FieldSpec],
    path_prefix: &str,
) -> Result<(), MitigateError> {
    let Some(map) = value.as_object() else {
        return Err(MitigateError::SchemaViolation {
            path: path_prefix.to_string(),
            detail: "expected an object".to_string(),
        });
    };
    for field in fields {
        match map.get(&field.name) {
            Some(v) => {
                if !type_matches(v, field.ty) {
                    return Err(MitigateError::SchemaViolation {
                        path: format!("{path_prefix}.{}", field.name),
                        detail: format!("expected {:?}", field.ty),
                    });
                }
            }
            None if field.required => {
                return Err(MitigateError::SchemaViolation {
                    path: format!("{path_prefix}.{}", field.name),
                    detail: "missing required field".to_string(),
                });
            }
            None => {}
        }
    }
    let mut unknown: Vec<&String> = map
        .keys()
        .filter(|k| !fields.iter().any(|f| &f.name == *k))
        .collect();
    unknown.sort();
    if let Some(key) = unknown.first() {
        return Err(MitigateError::SchemaViolation {
            path: format!("{path_prefix}.{key}"),
            detail: "unknown field (closed schema)".to_string(),
        });
    }
    Ok(())
}

pub(crate) fn validate_value(
    value: &serde_json::Value,
    schema: &SchemaDescriptor,
) -> Result<(), MitigateError> {
    match schema.shape {
        SchemaShape::Object => validate_object(value, &schema.fields, "$"),
        SchemaShape::ArrayOfObjects => {
            let Some(items) = value.as_array() else {
                return Err(MitigateError::SchemaViolation {
                    path: "$".to_string(),
                    detail: "expected an array".to_string(),
                });
            };
            for (i, item) in items.iter().enumerate() {
                validate_object(item, &schema.fields, &format!("$[{i}]"))?;
            }
            Ok(())
        }
        SchemaShape::ArrayOfStrings => {
            let ok = value
                .as_array()
                .map(|a| a.iter().all(|v| v.is_string()))
                .unwrap_or(false);
            if ok {
                Ok(())
            } else {
                Err(MitigateError::SchemaViolation {
                    path: "$".to_string(),
                    detail: "expected an array of strings".to_string(),
                })
            }
        }
    }
}

/// Parses `raw` and validates it against a closed schema. The caller's retry
/// policy decides what to do with a violation.
pub fn validate_structured(
    raw: &str,
    schema: &SchemaDescriptor,
) -> Result<serde_json::Value, MitigateError> {
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| MitigateError::SchemaViolation {
            path: "$".to_string(),
            detail: format!("not valid JSON: {e}"),
        })?;
    validate_value(&value, schema)?;
    Ok(value)
}

/// Normalizes a query key for intersection: casefold plus whitespace
/// collapse.
pub fn normalize_query_key(raw: &str) -> String {
    raw.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Intersection of all proposal sets after key normalization. An empty
/// intersection falls back to the first proposed set.
pub fn intersect_queries(query_sets: &[BTreeSet<String>]) -> Result<BTreeSet<String>, MitigateError> {
    if query_sets.is_empty() {
        return Err(MitigateError::NoProposals);
    }
    let normalized: Vec<BTreeSet<String>> = query_sets
        .iter()
        .map(|s| s.iter().map(|k| normalize_query_key(k)).collect())
        .collect();
    let mut intersection = normalized[0].clone();
    for set in &normalized[1..] {
        intersection = intersection.intersection(set).cloned().collect();
    }
    if intersection.is_empty() {
        Ok(normalized[0].clone())
    } else {
        Ok(intersection)
    }
}

/// How many query proposals to draw at each step. Explicit sizes are
/// per-step (index 0 is step 1); otherwise the linear default
/// `max(1, n0 − (t−1))` applies.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EnsembleSchedule {
    pub n0: usize,
    #[serde(default)]
    pub sizes: Vec<usize>,
}

impl EnsembleSchedule {
    /// Linear decay from `n0` down to 1.
    pub fn linear(n0: usize) -> Self {
        Self {
            n0,
            sizes: Vec::new(),
        }
    }

    /// Constant size at every step.
    pub fn constant(k: usize, horizon: usize) -> Self {
        Self {
            n0: k,
            sizes: vec![k.max(1); horizon],
        }
    }

    pub fn validate(&self) -> Result<(), MitigateError> {
        if self.n0 == 0 {
            return Err(MitigateError::SchemaViolation {
                path: "schedule.n0".to_string(),
                detail: "must be >= 1".to_string(),
            });
        }
        for (i, w) in self.sizes.windows(2).enumerate() {
            if w[1] > w[0] {
                return Err(MitigateError::SchemaViolation {
                    path: format!("schedule.sizes[{}]", i + 1),
                    detail: "ensemble size must be non-increasing".to_string(),
                });
            }
        }
        if self.sizes.iter().any(|&s| s == 0) {
            return Err(MitigateError::SchemaViolation {
                path: "schedule.sizes".to_string(),
                detail: "sizes must be >= 1".to_string(),
            });
        }
        Ok(())
    }
}

/// Ensemble size at 1-based step `t`; 1 beyond the schedule.
pub fn ensemble_size(t: usize, schedule: &EnsembleSchedule) -> usize {
    assert!(t >= 1, "steps are 1-based");
    if schedule.sizes.is_empty() {
        schedule.n0.saturating_sub(t - 1).max(1)
    } else {
        schedule.sizes.get(t - 1).copied().unwrap_or(1)
    }
}

/// Which mitigations are active for a simulated run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MitigationConfig {
    pub schedule: EnsembleSchedule,
    /// Queries per proposal set. Two or more makes agreement common enough
    /// for the intersection to bind.
    #[serde(default = "default_proposal_width")]
    pub proposal_width: usize,
    /// Temperature multiplier standing in for a structured-output
    /// constraint on a stage.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub structured_sum: bool,
    #[serde(default)]
    pub structured_update: bool,
    #[serde(default)]
    pub consensus: bool,
}

fn default_proposal_width() -> usize {
    2
}
fn default_gamma() -> f64 {
    0.5
}

impl MitigationConfig {
    /// No mitigation at all; runs reproduce the unmitigated path exactly.
    pub fn off() -> Self {
        Self {
            schedule: EnsembleSchedule::constant(1, 0),
            proposal_width: default_proposal_width(),
            gamma: 1.0,
            structured_sum: false,
            structured_update: false,
            consensus: false,
        }
    }

    /// Everything on: consensus with linear decay from `n0` and structured
    /// output on both the summary and update stages.
    pub fn full(n0: usize, gamma: f64) -> Self {
        Self {
            schedule: EnsembleSchedule::linear(n0),
            proposal_width: default_proposal_width(),
            gamma,
            structured_sum: true,
            structured_update: true,
            consensus: true,
        }
    }

    fn lambda_scale(&self, module: Module) -> f64 {
        match module {
            Module::Sum if self.structured_sum => self.gamma,
            Module::Update if self.structured_update => self.gamma,
            _ => 1.0,
        }
    }
}

/// Draws one proposal set of `width` distinct queries via tempered sampling
/// without replacement.
fn draw_proposal<R: Rng>(
    adjusted_logits: &[f64],
    lambda: f64,
    width: usize,
    rng: &mut R,
) -> BTreeSet<String> {
    let mut logits = adjusted_logits.to_vec();
    let mut chosen = BTreeSet::new();
    let width = width.min(logits.len()).max(1);
    let mut available: Vec<usize> = (0..logits.len()).collect();
    for _ in 0..width {
        let idx = tempered_sample(&logits, lambda, rng).expect("non-empty proposal logits");
        let query = available[idx];
        chosen.insert(query.to_string());
        logits.remove(idx);
        available.remove(idx);
        if logits.is_empty() {
            break;
        }
    }
    chosen
}

/// One step with mitigations applied.
///
/// With an ensemble size of 1 the query stage is the plain tempered draw, so
/// a neutral configuration (`N(t) ≡ 1`, γ = 1) reproduces the unmitigated
/// step bit-for-bit. With N ≥ 2, N proposal sets are drawn, intersected, and
/// the agreed query with the highest base logit executes.
pub fn mitigated_step<R: Rng>(
    world: &WorldSpec,
    belief: u64,
    t: usize,
    cfg: &PolicyConfig,
    mitigation: &MitigationConfig,
    rng: &mut R,
) -> StepOutcome {
    let n = if mitigation.consensus {
        ensemble_size(t + 1, &mitigation.schedule)
    } else {
        1
    };
    let query = if n <= 1 {
        choose_query(world, cfg, belief, t, rng)
    } else {
        let adjusted = sim::adjusted_query_logits(world, cfg, belief);
        let lambda = cfg.temperatures.get(Module::Query, t);
        let proposals: Vec<BTreeSet<String>> = (0..n)
            .map(|_| draw_proposal(&adjusted, lambda, mitigation.proposal_width, rng))
            .collect();
        let consensus = intersect_queries(&proposals).expect("proposal list is non-empty");
        consensus
            .iter()
            .map(|k| k.parse::<usize>().expect("simulator keys are query ids"))
            .max_by(|&a, &b| {
                cfg.query_logits[a]
                    .partial_cmp(&cfg.query_logits[b])
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .expect("consensus set is non-empty")
    };
    complete_step(
        world,
        cfg,
        belief,
        query,
        cfg.temperatures.get(Module::Sum, t) * mitigation.lambda_scale(Module::Sum),
        cfg.temperatures.get(Module::Update, t) * mitigation.lambda_scale(Module::Update),
        rng,
    )
}

fn run_mitigated_with_seed(
    world: &WorldSpec,
    cfg: &PolicyConfig,
    mitigation: &MitigationConfig,
    run_id: usize,
    seed: u64,
) -> TrajectoryRecord {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut beliefs = vec![0u64];
    let mut actions = Vec::new();
    let mut observations = Vec::new();
    let mut summaries = Vec::new();
    let mut citations = BTreeSet::new();
    let mut belief = 0u64;
    for t in 0..world.horizon {
        let outcome = mitigated_step(world, belief, t, cfg, mitigation, &mut rng);
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

/// Mitigated counterpart of [`sim::run_ensemble`], with the same seed
/// discipline.
pub fn run_ensemble_mitigated(
    world: &WorldSpec,
    cfg: &PolicyConfig,
    mitigation: &MitigationConfig,
    n_runs: usize,
    base_seed: u64,
) -> Vec<TrajectoryRecord> {
    map_indexed(n_runs, |i| {
        run_mitigated_with_seed(world, cfg, mitigation, i, base_seed ^ i as u64)
    })
}

/// Empirical entropy (nats) of the step-1 query choice under a mitigation
/// setting, estimated over `draws` independent runs.
pub fn query_choice_entropy(
    world: &WorldSpec,
    cfg: &PolicyConfig,
    mitigation: &MitigationConfig,
    draws: usize,
    base_seed: u64,
) -> f64 {
    use rand::SeedableRng;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for i in 0..draws {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(base_seed ^ i as u64);
        let outcome = mitigated_step(world, 0, 0, cfg, mitigation, &mut rng);
        *counts.entry(outcome.observation).or_default() += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / draws as f64;
            -p * p.ln()
        })
        .sum()
}
