//! Pairwise total-variance estimators over run-output vectors.
//!
//! A run's output at one level (answer, finding, citation) is a vector in
//! `[0,1]^k` whose dimensions are aligned across runs. The total variance of
//! the underlying random vector, `Tr(Var(X))`, equals `E‖X₁−X₂‖²/2` for
//! i.i.d. copies, which the pairwise estimator below targets without bias:
//!
//! ```text
//! tv = 1/(2n(n−1)) · Σᵢ Σⱼ ‖x̃ᵢ − x̃ⱼ‖²
//! ```
//!
//! With ℓ2-normalized inputs the estimate lands in `[0,1]` and reduces to
//! `1 − mean pairwise cosine`; for one-hot answers it reduces to the
//! proportion of discordant pairs. Both identities are exposed as separate
//! functions so they can be cross-checked numerically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{compensated_total, CompensatedSum};
use crate::par::{map_indexed, map_indexed_seq};

/// Which extracted object a vector describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Answer,
    Finding,
    Citation,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Answer => write!(f, "answer"),
            Level::Finding => write!(f, "finding"),
            Level::Citation => write!(f, "citation"),
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    /// The estimator divides by n(n−1); a single run carries no variance
    /// information, so n < 2 is an error rather than a silent zero.
    #[error("need at least 2 runs, got {got}")]
    InsufficientRuns { got: usize },
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector level mismatch: expected {expected}, got {got}")]
    LevelMismatch { expected: Level, got: Level },
    #[error("entry {value} at index {index} outside [0,1]")]
    InvalidEntry { index: usize, value: f64 },
    #[error("unknown item id: {0}")]
    UnknownItem(String),
}

/// One run's output at a given level, with entries in `[0,1]`.
///
/// Answer vectors are one-hot (or all-zero when the run produced no answer),
/// finding/citation vectors are binary membership indicators over the
/// canonical item index, and semantic vectors carry similarity weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputVector {
    level: Level,
    entries: Vec<f64>,
}

impl OutputVector {
    /// One-hot answer vector with a 1 at `index`.
    pub fn answer(index: usize, dim: usize) -> Result<Self, MetricsError> {
        if index >= dim {
            return Err(MetricsError::DimensionMismatch {
                expected: dim,
                got: index + 1,
            });
        }
        let mut entries = vec![0.0; dim];
        entries[index] = 1.0;
        Ok(Self {
            level: Level::Answer,
            entries,
        })
    }

    /// All-zero answer vector for a run that produced no answer.
    pub fn empty_answer(dim: usize) -> Self {
        Self {
            level: Level::Answer,
            entries: vec![0.0; dim],
        }
    }

    /// Binary membership vector: 1 at every index in `members`.
    pub fn binary<I>(level: Level, members: I, dim: usize) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = usize>,
    {
        let mut entries = vec![0.0; dim];
        for m in members {
            if m >= dim {
                return Err(MetricsError::DimensionMismatch {
                    expected: dim,
                    got: m + 1,
                });
            }
            entries[m] = 1.0;
        }
        Ok(Self { level, entries })
    }

    /// Dense vector with entries in `[0,1]`, e.g. from a similarity oracle.
    pub fn semantic(level: Level, entries: Vec<f64>) -> Result<Self, MetricsError> {
        for (index, &value) in entries.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(MetricsError::InvalidEntry { index, value });
            }
        }
        Ok(Self { level, entries })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Number of nonzero entries.
    pub fn support_size(&self) -> usize {
        self.entries.iter().filter(|&&v| v != 0.0).count()
    }

    /// Returns `v/‖v‖₂`, or the all-zeros vector when `‖v‖₂ = 0`.
    pub fn l2_normalize(&self) -> OutputVector {
        let norm = self.entries.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            OutputVector {
                level: self.level,
                entries: self.entries.iter().map(|v| v / norm).collect(),
            }
        } else {
            self.clone()
        }
    }
}

fn check_family(vs: &[OutputVector]) -> Result<(), MetricsError> {
    if vs.len() < 2 {
        return Err(MetricsError::InsufficientRuns { got: vs.len() });
    }
    let dim = vs[0].dim();
    let level = vs[0].level();
    for v in &vs[1..] {
        if v.dim() != dim {
            return Err(MetricsError::DimensionMismatch {
                expected: dim,
                got: v.dim(),
            });
        }
        if v.level() != level {
            return Err(MetricsError::LevelMismatch {
                expected: level,
                got: v.level(),
            });
        }
    }
    Ok(())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Shared kernel: sums `f(i, j)` over unordered pairs `i < j` with one
/// compensated row partial per `i`, folded in index order. The fold order is
/// identical in the parallel and sequential builds, so results are
/// bit-stable across thread counts.
fn pairwise_sum<F>(n: usize, sequential: bool, f: F) -> f64
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    let row = |i: usize| {
        let mut acc = CompensatedSum::new();
        for j in (i + 1)..n {
            acc.add(f(i, j));
        }
        acc.value()
    };
    let partials = if sequential {
        map_indexed_seq(n, row)
    } else {
        map_indexed(n, row)
    };
    compensated_total(&partials)
}

fn tv_estimate_impl(
    vs: &[OutputVector],
    normalize: bool,
    sequential: bool,
) -> Result<f64, MetricsError> {
    check_family(vs)?;
    let n = vs.len();
    let prepared: Vec<OutputVector> = if normalize {
        vs.iter().map(OutputVector::l2_normalize).collect()
    } else {
        vs.to_vec()
    };
    // Unordered pairs doubled: 2·Σ_{i<j} ‖xᵢ−xⱼ‖² / (2n(n−1)).
    let total = pairwise_sum(n, sequential, |i, j| {
        squared_distance(prepared[i].entries(), prepared[j].entries())
    });
    Ok(total / (n as f64 * (n - 1) as f64))
}

/// Pairwise total-variance estimate over `n ≥ 2` runs.
///
/// With `normalize` set, each vector is ℓ2-normalized first and the result
/// lies in `[0,1]` up to rounding. Symmetric under permutation of inputs.
pub fn tv_estimate(vs: &[OutputVector], normalize: bool) -> Result<f64, MetricsError> {
    tv_estimate_impl(vs, normalize, false)
}

/// Sequential kernel behind [`tv_estimate`]; used by the benchmark suite to
/// compare against the parallel path within one build.
pub fn tv_estimate_seq(vs: &[OutputVector], normalize: bool) -> Result<f64, MetricsError> {
    tv_estimate_impl(vs, normalize, true)
}

/// Pairwise variance of the support size `‖x‖₀`. Equals the unbiased sample
/// variance of the support sizes.
pub fn tv_support_size(vs: &[OutputVector]) -> Result<f64, MetricsError> {
    check_family(vs)?;
    let n = vs.len();
    let supports: Vec<f64> = vs.iter().map(|v| v.support_size() as f64).collect();
    let total = pairwise_sum(n, false, |i, j| {
        let d = supports[i] - supports[j];
        d * d
    });
    Ok(total / (n as f64 * (n - 1) as f64))
}

/// Proportion of discordant ordered pairs among canonical answer labels.
///
/// Equals [`tv_estimate`] applied to the corresponding one-hot vectors.
pub fn answer_discordance<T: PartialEq + Sync>(labels: &[T]) -> Result<f64, MetricsError> {
    if labels.len() < 2 {
        return Err(MetricsError::InsufficientRuns { got: labels.len() });
    }
    let n = labels.len();
    let total = pairwise_sum(n, false, |i, j| if labels[i] != labels[j] { 2.0 } else { 0.0 });
    Ok(total / (n as f64 * (n - 1) as f64))
}

/// Mean pairwise dot product of the ℓ2-normalized vectors.
///
/// For unit-norm inputs, `tv_estimate(vs, true) = 1 − mean_pairwise_cosine(vs)`.
pub fn mean_pairwise_cosine(vs: &[OutputVector]) -> Result<f64, MetricsError> {
    check_family(vs)?;
    let n = vs.len();
    let normalized: Vec<OutputVector> = vs.iter().map(OutputVector::l2_normalize).collect();
    let total = pairwise_sum(n, false, |i, j| {
        normalized[i]
            .entries()
            .iter()
            .zip(normalized[j].entries())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * 2.0
    });
    Ok(total / (n as f64 * (n - 1) as f64))
}

/// Pairwise similarity in `[0,1]` over item identifiers. Implementations
/// must be symmetric with `similarity(u, u) = 1`.
pub trait SimilarityOracle {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, MetricsError>;
}

/// Exact-match indicator similarity. Reduces semantic vectorization to plain
/// set membership.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactMatchSimilarity;

impl SimilarityOracle for ExactMatchSimilarity {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, MetricsError> {
        Ok(if a == b { 1.0 } else { 0.0 })
    }
}

/// Table-backed similarity over a closed item set. Unlisted pairs score 0,
/// the diagonal scores 1, and lookups are symmetric.
#[derive(Clone, Debug, Default)]
pub struct TableSimilarity {
    items: std::collections::HashSet<String>,
    pairs: std::collections::HashMap<(String, String), f64>,
}

impl TableSimilarity {
    pub fn new<I: IntoIterator<Item = String>>(items: I) -> Self {
        Self {
            items: items.into_iter().collect(),
            pairs: std::collections::HashMap::new(),
        }
    }

    /// Registers a symmetric similarity score for a pair of items.
    pub fn set_pair(&mut self, a: &str, b: &str, score: f64) {
        assert!((0.0..=1.0).contains(&score), "similarity outside [0,1]");
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        self.pairs.insert((lo.to_string(), hi.to_string()), score);
    }
}

impl SimilarityOracle for TableSimilarity {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, MetricsError> {
        if !self.items.contains(a) {
            return Err(MetricsError::UnknownItem(a.to_string()));
        }
        if !self.items.contains(b) {
            return Err(MetricsError::UnknownItem(b.to_string()));
        }
        if a == b {
            return Ok(1.0);
        }
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        Ok(self
            .pairs
            .get(&(lo.to_string(), hi.to_string()))
            .copied()
            .unwrap_or(0.0))
    }
}

/// Builds a dense vector over `global_items` where entry `k` is the best
/// similarity between item `k` and any item the run produced. An empty run
/// yields the zero vector.
pub fn semantic_vectorize<S: SimilarityOracle>(
    run_items: &[String],
    global_items: &[String],
    level: Level,
    oracle: &S,
) -> Result<OutputVector, MetricsError> {
    let mut entries = Vec::with_capacity(global_items.len());
    for global in global_items {
        let mut best = 0.0f64;
        for item in run_items {
            let s = oracle.similarity(global, item)?;
            if s > best {
                best = s;
            }
        }
        entries.push(best);
    }
    OutputVector::semantic(level, entries)
}

/// Summary statistics for one set of runs at one level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvResult {
    /// Normalized total variance, clamped to `[0,1]`.
    pub tv: f64,
    /// Variance of the support size (unclamped, nonnegative).
    pub support_tv: f64,
    pub n_runs: usize,
    pub mean_support: f64,
}

impl TvResult {
    /// Computes all statistics for one family of vectors.
    pub fn from_vectors(vs: &[OutputVector]) -> Result<Self, MetricsError> {
        let tv = tv_estimate(vs, true)?.clamp(0.0, 1.0);
        let support_tv = tv_support_size(vs)?.max(0.0);
        let mean_support =
            vs.iter().map(|v| v.support_size() as f64).sum::<f64>() / vs.len() as f64;
        Ok(Self {
            tv,
            support_tv,
            n_runs: vs.len(),
            mean_support,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_from_sets(sets: &[&[usize]], dim: usize) -> Vec<OutputVector> {
        sets.iter()
            .map(|s| OutputVector::binary(Level::Finding, s.iter().copied(), dim).unwrap())
            .collect()
    }

    #[test]
    fn l2_normalize_examples() {
        let v = OutputVector::binary(Level::Finding, [0, 1], 4).unwrap();
        let n = v.l2_normalize();
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert!((n.entries()[0] - inv_sqrt2).abs() < 1e-12);
        assert!((n.entries()[1] - inv_sqrt2).abs() < 1e-12);
        assert_eq!(n.entries()[2], 0.0);

        let zero = OutputVector::empty_answer(3);
        assert_eq!(zero.l2_normalize().entries(), &[0.0, 0.0, 0.0]);

        let one_hot = OutputVector::answer(1, 3).unwrap();
        assert_eq!(one_hot.l2_normalize(), one_hot);
    }

    #[test]
    fn tv_one_hot_answers() {
        // {e1, e1, e2}: 4 of 6 ordered pairs discordant, each contributing 2.
        let vs = vec![
            OutputVector::answer(0, 2).unwrap(),
            OutputVector::answer(0, 2).unwrap(),
            OutputVector::answer(1, 2).unwrap(),
        ];
        let tv = tv_estimate(&vs, true).unwrap();
        assert!((tv - 8.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn tv_two_overlapping_finding_sets() {
        let vs = binary_from_sets(&[&[0, 1], &[1, 2]], 3);
        let tv = tv_estimate(&vs, true).unwrap();
        assert!((tv - 0.5).abs() < 1e-12);
        let cos = mean_pairwise_cosine(&vs).unwrap();
        assert!((cos - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tv_identical_vectors_is_zero() {
        for n in 2..6 {
            let vs: Vec<OutputVector> = (0..n)
                .map(|_| OutputVector::binary(Level::Citation, [0, 2], 4).unwrap())
                .collect();
            assert_eq!(tv_estimate(&vs, true).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_omission_worked_examples() {
        // |S1| = 100 vs 99 shared: 1 − 99/√(100·99) ≈ 0.005.
        let s1: Vec<usize> = (0..100).collect();
        let s2: Vec<usize> = (0..99).collect();
        let vs = binary_from_sets(&[&s1, &s2], 100);
        let tv = tv_estimate(&vs, true).unwrap();
        assert!((tv - 0.005).abs() < 5e-4, "tv = {tv}");
        assert_eq!(format!("{tv:.3}"), "0.005");

        let s1: Vec<usize> = (0..10).collect();
        let s2: Vec<usize> = (0..9).collect();
        let vs = binary_from_sets(&[&s1, &s2], 10);
        let tv = tv_estimate(&vs, true).unwrap();
        assert_eq!(format!("{tv:.3}"), "0.051");
    }

    #[test]
    fn single_omission_penalty_decreases_with_scale() {
        let mut last = f64::INFINITY;
        for m in [5usize, 10, 20, 50, 100] {
            let s1: Vec<usize> = (0..m).collect();
            let s2: Vec<usize> = (0..m - 1).collect();
            let vs = binary_from_sets(&[&s1, &s2], m);
            let tv = tv_estimate(&vs, true).unwrap();
            assert!(tv < last, "tv({m}) = {tv} not below {last}");
            last = tv;
        }
    }

    #[test]
    fn support_size_variance_examples() {
        let vs = binary_from_sets(&[&[0, 1, 2], &[0, 1, 2, 3, 4]], 5);
        assert!((tv_support_size(&vs).unwrap() - 2.0).abs() < 1e-12);

        let same = binary_from_sets(&[&[0, 1, 2, 3], &[1, 2, 3, 4], &[0, 2, 3, 4]], 5);
        assert_eq!(tv_support_size(&same).unwrap(), 0.0);

        // Supports {88, 92, 92}: sample variance 5.333…, mean 90.667.
        let s88: Vec<usize> = (0..88).collect();
        let s92: Vec<usize> = (0..92).collect();
        let vs = binary_from_sets(&[&s88, &s92, &s92], 92);
        let r = TvResult::from_vectors(&vs).unwrap();
        assert!((r.support_tv - 16.0 / 3.0).abs() < 1e-9);
        assert!((r.mean_support - 272.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn discordance_examples() {
        assert!((answer_discordance(&["a", "a", "b"]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(answer_discordance(&["a"; 4]).unwrap(), 0.0);
        assert_eq!(answer_discordance(&["a", "b", "c"]).unwrap(), 1.0);
    }

    #[test]
    fn discordance_matches_one_hot_tv() {
        let labels = [2usize, 0, 1, 0, 2, 2, 1];
        let vs: Vec<OutputVector> = labels
            .iter()
            .map(|&l| OutputVector::answer(l, 3).unwrap())
            .collect();
        let d = answer_discordance(&labels).unwrap();
        let tv = tv_estimate(&vs, true).unwrap();
        assert!((d - tv).abs() < 1e-12);
    }

    #[test]
    fn cosine_edge_cases() {
        let identical = binary_from_sets(&[&[0, 3], &[0, 3]], 4);
        assert!((mean_pairwise_cosine(&identical).unwrap() - 1.0).abs() < 1e-12);
        let disjoint = binary_from_sets(&[&[0, 1], &[2, 3]], 4);
        assert_eq!(mean_pairwise_cosine(&disjoint).unwrap(), 0.0);
    }

    #[test]
    fn insufficient_runs_and_dimension_mismatch() {
        let one = binary_from_sets(&[&[0]], 2);
        assert!(matches!(
            tv_estimate(&one, true),
            Err(MetricsError::InsufficientRuns { got: 1 })
        ));
        assert!(matches!(
            tv_support_size(&one),
            Err(MetricsError::InsufficientRuns { got: 1 })
        ));
        assert!(matches!(
            answer_discordance::<u32>(&[]),
            Err(MetricsError::InsufficientRuns { got: 0 })
        ));

        let mixed = vec![
            OutputVector::binary(Level::Finding, [0], 2).unwrap(),
            OutputVector::binary(Level::Finding, [0], 3).unwrap(),
        ];
        assert!(matches!(
            tv_estimate(&mixed, true),
            Err(MetricsError::DimensionMismatch { expected: 2, got: 3 })
        ));

        let levels = vec![
            OutputVector::binary(Level::Finding, [0], 2).unwrap(),
            OutputVector::binary(Level::Citation, [0], 2).unwrap(),
        ];
        assert!(matches!(
            tv_estimate(&levels, true),
            Err(MetricsError::LevelMismatch { .. })
        ));
    }

    #[test]
    fn zero_vector_convention() {
        // A zero vector keeps distance 1 to any unit vector after
        // normalization: tv over {zero, unit} = 2·1/(2·2·1) = 0.5.
        let vs = vec![
            OutputVector::empty_answer(2),
            OutputVector::answer(0, 2).unwrap(),
        ];
        let tv = tv_estimate(&vs, true).unwrap();
        assert!((tv - 0.5).abs() < 1e-12);
    }

    #[test]
    fn semantic_vectorize_worked_examples() {
        let globals = vec!["cat".to_string(), "dog".to_string(), "car".to_string()];
        let mut sim = TableSimilarity::new(globals.iter().cloned());
        sim.set_pair("cat", "dog", 0.8);

        let run = vec!["cat".to_string()];
        let v = semantic_vectorize(&run, &globals, Level::Finding, &sim).unwrap();
        assert_eq!(v.entries(), &[1.0, 0.8, 0.0]);

        let run = vec!["dog".to_string(), "car".to_string()];
        let v = semantic_vectorize(&run, &globals, Level::Finding, &sim).unwrap();
        assert_eq!(v.entries(), &[0.8, 1.0, 1.0]);

        let empty: Vec<String> = vec![];
        let v = semantic_vectorize(&empty, &globals, Level::Finding, &sim).unwrap();
        assert_eq!(v.entries(), &[0.0, 0.0, 0.0]);

        let unknown = vec!["plane".to_string()];
        assert!(matches!(
            semantic_vectorize(&unknown, &globals, Level::Finding, &sim),
            Err(MetricsError::UnknownItem(_))
        ));
    }

    #[test]
    fn semantic_exact_match_reduces_to_binary() {
        let globals = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let run = vec!["c".to_string(), "a".to_string()];
        let v = semantic_vectorize(&run, &globals, Level::Finding, &ExactMatchSimilarity).unwrap();
        let expected = OutputVector::binary(Level::Finding, [0, 2], 3).unwrap();
        assert_eq!(v.entries(), expected.entries());
    }

    #[test]
    fn sequential_kernel_matches_parallel() {
        let sets: Vec<Vec<usize>> = (0..20)
            .map(|i| (0..(i % 7 + 1)).map(|j| (i + j) % 12).collect())
            .collect();
        let refs: Vec<&[usize]> = sets.iter().map(|s| s.as_slice()).collect();
        let vs = binary_from_sets(&refs, 12);
        let a = tv_estimate(&vs, true).unwrap();
        let b = tv_estimate_seq(&vs, true).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
