//! Cross-run canonicalization.
//!
//! Variance estimation only makes sense when dimension k of every run's
//! vector refers to the same answer, finding, or URL. This module builds
//! that shared index: URLs are normalized and exact-matched, answers and
//! findings are clustered greedily against an equivalence oracle (string
//! rules offline, a judge when available).

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::extract::{equivalence_prompt, ANSWER_EQUIV_TEMPLATE, FINDING_EQUIV_TEMPLATE};
use crate::judge::{Judge, JudgeError};
use crate::metrics::{Level, MetricsError, OutputVector};

#[derive(Debug, Error)]
pub enum CanonError {
    #[error("malformed url '{raw}': {detail}")]
    MalformedUrl { raw: String, detail: String },
    #[error("equivalence oracle unavailable: {0}")]
    OracleUnavailable(#[from] JudgeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Query parameters dropped during URL normalization. Fixed and published so
/// the transform stays auditable.
const TRACKING_PARAM_PREFIXES: &[&str] = &["utm_"];
const TRACKING_PARAMS: &[&str] = &["gclid", "fbclid"];

fn is_tracking_param(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    TRACKING_PARAM_PREFIXES
        .iter()
        .any(|p| lower.starts_with(p))
        || TRACKING_PARAMS.contains(&lower.as_str())
}

/// Canonicalizes a URL for exact-match citation comparison.
///
/// In order: trim whitespace, lowercase scheme and host, strip the fragment,
/// drop default ports (80/443), drop the trailing slash of the path, drop
/// tracking parameters (`utm_*`, `gclid`, `fbclid`) and sort the rest by
/// name. The output is rebuilt from components so the root path serializes
/// without a trailing slash, which makes the transform idempotent.
pub fn normalize_url(raw: &str) -> Result<String, CanonError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(CanonError::MalformedUrl {
            raw: raw.to_string(),
            detail: "empty string".to_string(),
        });
    }
    let parsed = Url::parse(trimmed).map_err(|e| CanonError::MalformedUrl {
        raw: raw.to_string(),
        detail: e.to_string(),
    })?;
    if !parsed.has_host() {
        return Err(CanonError::MalformedUrl {
            raw: raw.to_string(),
            detail: "no host".to_string(),
        });
    }
    let scheme = parsed.scheme().to_ascii_lowercase();
    let host = parsed.host_str().unwrap_or_default().to_ascii_lowercase();
    let default_port = matches!(
        (scheme.as_str(), parsed.port()),
        ("http", Some(80)) | ("https", Some(443)) | (_, None)
    );
    let mut out = format!("{scheme}://");
    if !parsed.username().is_empty() {
        out.push_str(parsed.username());
        if let Some(pass) = parsed.password() {
            out.push(':');
            out.push_str(pass);
        }
        out.push('@');
    }
    out.push_str(&host);
    if !default_port {
        out.push_str(&format!(":{}", parsed.port().expect("checked above")));
    }
    let path = parsed.path();
    let path = if path.len() > 1 || path == "/" {
        path.strip_suffix('/').unwrap_or(path)
    } else {
        path
    };
    out.push_str(path);
    let mut params: Vec<(String, String)> = parsed
        .query_pairs()
        .filter(|(name, _)| !is_tracking_param(name))
        .map(|(k, v)| (k.into_owned(), v.into_owned()))
        .collect();
    params.sort_by(|a, b| a.0.cmp(&b.0));
    if !params.is_empty() {
        let query: Vec<String> = params
            .iter()
            .map(|(k, v)| {
                if v.is_empty() {
                    k.clone()
                } else {
                    format!("{k}={v}")
                }
            })
            .collect();
        out.push('?');
        out.push_str(&query.join("&"));
    }
    Ok(out)
}

/// Citation key for a raw URL: the normalized form, or the raw string
/// verbatim when it cannot be parsed (logged, not fatal).
pub fn citation_key(raw: &str) -> String {
    match normalize_url(raw) {
        Ok(key) => key,
        Err(e) => {
            log::warn!("using raw citation string as its own key: {e}");
            raw.trim().to_string()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    ExactString,
    NormalizedString,
    JudgeBacked,
}

enum OracleBackend<'a> {
    ExactString,
    NormalizedString,
    JudgeBacked {
        judge: &'a dyn Judge,
        template: &'static str,
        cache: Mutex<HashMap<(String, String), bool>>,
    },
}

/// Decides whether two texts are the same answer or the same fact.
/// Reflexive by construction and deterministic within a session (judge
/// verdicts are cached by ordered text pair).
pub struct EquivalenceOracle<'a> {
    kind: OracleKind,
    backend: OracleBackend<'a>,
}

impl<'a> EquivalenceOracle<'a> {
    pub fn exact() -> Self {
        Self {
            kind: OracleKind::ExactString,
            backend: OracleBackend::ExactString,
        }
    }

    /// Casefold plus trim before comparing.
    pub fn normalized() -> Self {
        Self {
            kind: OracleKind::NormalizedString,
            backend: OracleBackend::NormalizedString,
        }
    }

    pub fn judge_backed_answers(judge: &'a dyn Judge) -> Self {
        Self {
            kind: OracleKind::JudgeBacked,
            backend: OracleBackend::JudgeBacked {
                judge,
                template: ANSWER_EQUIV_TEMPLATE,
                cache: Mutex::new(HashMap::new()),
            },
        }
    }

    pub fn judge_backed_findings(judge: &'a dyn Judge) -> Self {
        Self {
            kind: OracleKind::JudgeBacked,
            backend: OracleBackend::JudgeBacked {
                judge,
                template: FINDING_EQUIV_TEMPLATE,
                cache: Mutex::new(HashMap::new()),
            },
        }
    }

    pub fn kind(&self) -> OracleKind {
        self.kind
    }

    pub fn equivalent(&self, a: &str, b: &str) -> Result<bool, CanonError> {
        if a == b {
            return Ok(true);
        }
        match &self.backend {
            OracleBackend::ExactString => Ok(false),
            OracleBackend::NormalizedString => {
                Ok(a.trim().to_lowercase() == b.trim().to_lowercase())
            }
            OracleBackend::JudgeBacked {
                judge,
                template,
                cache,
            } => {
                let key = (a.to_string(), b.to_string());
                if let Some(&verdict) = cache.lock().expect("cache lock").get(&key) {
                    return Ok(verdict);
                }
                let raw = judge.complete(&equivalence_prompt(template, a, b))?;
                let verdict = raw.trim().to_lowercase().starts_with("yes");
                cache.lock().expect("cache lock").insert(key, verdict);
                Ok(verdict)
            }
        }
    }
}

/// One canonical item: its id (also its vector dimension) and the
/// representative text or URL that later items were compared against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonItem {
    pub id: usize,
    pub representative: String,
}

/// Shared cross-run index at one level: canonical items in creation order,
/// plus per-run assignments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSpace {
    pub level: Level,
    pub canon_items: Vec<CanonItem>,
    /// Per run, the set of canonical ids present.
    pub assignments: Vec<BTreeSet<usize>>,
    /// Per run, per raw item, the canonical id it mapped to.
    pub item_assignments: Vec<Vec<usize>>,
}

impl CanonicalSpace {
    /// Vector dimension at this level.
    pub fn k(&self) -> usize {
        self.canon_items.len()
    }
}

/// Greedy sequential clustering: items are visited in (run, position) order
/// and compared to existing representatives in creation order; the first
/// match wins, otherwise the item founds a new canonical entry.
fn greedy_cluster(
    level: Level,
    per_run_items: &[Vec<String>],
    oracle: &EquivalenceOracle<'_>,
) -> Result<CanonicalSpace, CanonError> {
    let mut canon_items: Vec<CanonItem> = Vec::new();
    let mut assignments = Vec::with_capacity(per_run_items.len());
    let mut item_assignments = Vec::with_capacity(per_run_items.len());
    for run_items in per_run_items {
        let mut run_set = BTreeSet::new();
        let mut run_map = Vec::with_capacity(run_items.len());
        for item in run_items {
            let mut assigned = None;
            for canon in &canon_items {
                if oracle.equivalent(&canon.representative, item)? {
                    assigned = Some(canon.id);
                    break;
                }
            }
            let id = match assigned {
                Some(id) => id,
                None => {
                    let id = canon_items.len();
                    canon_items.push(CanonItem {
                        id,
                        representative: item.clone(),
                    });
                    id
                }
            };
            run_set.insert(id);
            run_map.push(id);
        }
        assignments.push(run_set);
        item_assignments.push(run_map);
    }
    Ok(CanonicalSpace {
        level,
        canon_items,
        assignments,
        item_assignments,
    })
}

/// Clusters per-run finding texts into a canonical finding space.
pub fn cluster_findings(
    per_run_findings: &[Vec<String>],
    oracle: &EquivalenceOracle<'_>,
) -> Result<CanonicalSpace, CanonError> {
    greedy_cluster(Level::Finding, per_run_findings, oracle)
}

/// Reserved representative for runs whose answer is empty. All empty
/// answers share one canonical id regardless of oracle.
const EMPTY_ANSWER_KEY: &str = "\u{0}empty-answer";

/// Builds the canonical answer space. Empty answers (after trimming) all map
/// to one reserved id.
pub fn answer_space(
    answers: &[String],
    oracle: &EquivalenceOracle<'_>,
) -> Result<CanonicalSpace, CanonError> {
    let mut canon_items: Vec<CanonItem> = Vec::new();
    let mut assignments = Vec::with_capacity(answers.len());
    let mut item_assignments = Vec::with_capacity(answers.len());
    let mut empty_id: Option<usize> = None;
    for answer in answers {
        let id = if answer.trim().is_empty() {
            *empty_id.get_or_insert_with(|| {
                let id = canon_items.len();
                canon_items.push(CanonItem {
                    id,
                    representative: EMPTY_ANSWER_KEY.to_string(),
                });
                id
            })
        } else {
            let mut assigned = None;
            for canon in &canon_items {
                if canon.representative == EMPTY_ANSWER_KEY {
                    continue;
                }
                if oracle.equivalent(&canon.representative, answer)? {
                    assigned = Some(canon.id);
                    break;
                }
            }
            match assigned {
                Some(id) => id,
                None => {
                    let id = canon_items.len();
                    canon_items.push(CanonItem {
                        id,
                        representative: answer.clone(),
                    });
                    id
                }
            }
        };
        assignments.push(BTreeSet::from([id]));
        item_assignments.push(vec![id]);
    }
    Ok(CanonicalSpace {
        level: Level::Answer,
        canon_items,
        assignments,
        item_assignments,
    })
}

/// Canonical answer id per run.
pub fn canonicalize_answers(
    answers: &[String],
    oracle: &EquivalenceOracle<'_>,
) -> Result<Vec<usize>, CanonError> {
    let space = answer_space(answers, oracle)?;
    Ok(space
        .item_assignments
        .iter()
        .map(|ids| ids[0])
        .collect())
}

/// Builds the canonical citation space: URL normalization followed by exact
/// key matching. Duplicate URLs within a run collapse (set semantics).
pub fn citation_space(per_run_urls: &[Vec<String>]) -> CanonicalSpace {
    let mut key_to_id: HashMap<String, usize> = HashMap::new();
    let mut canon_items = Vec::new();
    let mut assignments = Vec::with_capacity(per_run_urls.len());
    let mut item_assignments = Vec::with_capacity(per_run_urls.len());
    for run_urls in per_run_urls {
        let mut run_set = BTreeSet::new();
        let mut run_map = Vec::with_capacity(run_urls.len());
        for raw in run_urls {
            let key = citation_key(raw);
            let id = *key_to_id.entry(key.clone()).or_insert_with(|| {
                let id = canon_items.len();
                canon_items.push(CanonItem {
                    id,
                    representative: key,
                });
                id
            });
            run_set.insert(id);
            run_map.push(id);
        }
        assignments.push(run_set);
        item_assignments.push(run_map);
    }
    CanonicalSpace {
        level: Level::Citation,
        canon_items,
        assignments,
        item_assignments,
    }
}

/// Per-run output vectors over a canonical space: one-hot for answers,
/// binary membership otherwise. A run with no items gets the zero vector.
pub fn build_vectors(space: &CanonicalSpace) -> Result<Vec<OutputVector>, CanonError> {
    let dim = space.k().max(1);
    let mut vectors = Vec::with_capacity(space.assignments.len());
    for run in &space.assignments {
        let v = match space.level {
            Level::Answer => match run.iter().next() {
                Some(&id) => OutputVector::answer(id, dim)?,
                None => OutputVector::empty_answer(dim),
            },
            level => OutputVector::binary(level, run.iter().copied(), dim)?,
        };
        vectors.push(v);
    }
    Ok(vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::MockJudge;

    #[test]
    fn url_rules_worked_examples() {
        assert_eq!(
            normalize_url("HTTPS://Example.COM:443/path/#sec").unwrap(),
            "https://example.com/path"
        );
        assert_eq!(
            normalize_url("http://a.com/x?utm_source=t&b=2&a=1").unwrap(),
            "http://a.com/x?a=1&b=2"
        );
        assert_eq!(normalize_url("https://a.com").unwrap(), "https://a.com");
    }

    #[test]
    fn url_normalization_details() {
        assert_eq!(
            normalize_url(" http://a.com:80/p ").unwrap(),
            "http://a.com/p"
        );
        assert_eq!(
            normalize_url("https://a.com:8443/p").unwrap(),
            "https://a.com:8443/p"
        );
        assert_eq!(
            normalize_url("http://a.com/x?gclid=1&fbclid=2&q=rust").unwrap(),
            "http://a.com/x?q=rust"
        );
        assert_eq!(normalize_url("https://a.com/").unwrap(), "https://a.com");
        assert!(normalize_url("not a url").is_err());
        assert!(normalize_url("").is_err());
    }

    #[test]
    fn url_normalization_is_idempotent() {
        let inputs = [
            "HTTPS://Example.COM:443/path/#sec",
            "http://a.com/x?utm_source=t&b=2&a=1",
            "https://a.com",
            "http://user:pw@Host.Org:8080/deep/path/?z=9&a=1#frag",
        ];
        for raw in inputs {
            let once = normalize_url(raw).unwrap();
            let twice = normalize_url(&once).unwrap();
            assert_eq!(once, twice, "not idempotent for {raw}");
        }
    }

    #[test]
    fn citation_key_degrades_to_verbatim() {
        assert_eq!(citation_key("::nonsense::"), "::nonsense::");
        assert_eq!(citation_key("https://A.com/"), "https://a.com");
    }

    #[test]
    fn judge_backed_clustering_merges_equivalent_findings() {
        // The mock judge affirms equivalence only for casefold-equal texts.
        let oracle = EquivalenceOracle::judge_backed_findings(&MockJudge);
        let runs = vec![
            vec!["X was founded in 1900".to_string()],
            vec!["x was founded in 1900".to_string()],
        ];
        let space = cluster_findings(&runs, &oracle).unwrap();
        assert_eq!(space.k(), 1);
        assert_eq!(space.assignments[0], BTreeSet::from([0]));
        assert_eq!(space.assignments[1], BTreeSet::from([0]));

        let runs = vec![vec!["A".to_string()], vec!["B".to_string()]];
        let space = cluster_findings(&runs, &oracle).unwrap();
        assert_eq!(space.k(), 2);
        assert_eq!(space.assignments[0], BTreeSet::from([0]));
        assert_eq!(space.assignments[1], BTreeSet::from([1]));
    }

    #[test]
    fn exact_oracle_is_string_deduplication() {
        let oracle = EquivalenceOracle::exact();
        let runs = vec![
            vec!["f1".to_string(), "f2".to_string()],
            vec!["f1".to_string(), "f2".to_string()],
            vec!["f2".to_string(), "f1".to_string()],
        ];
        let space = cluster_findings(&runs, &oracle).unwrap();
        assert_eq!(space.k(), 2);
        for a in &space.assignments {
            assert_eq!(a, &BTreeSet::from([0, 1]));
        }
    }

    #[test]
    fn every_raw_item_maps_exactly_once() {
        let oracle = EquivalenceOracle::normalized();
        let runs = vec![
            vec!["Alpha".to_string(), "beta".to_string(), "ALPHA ".to_string()],
            vec!["gamma".to_string()],
        ];
        let space = cluster_findings(&runs, &oracle).unwrap();
        for (run, ids) in runs.iter().zip(&space.item_assignments) {
            assert_eq!(run.len(), ids.len());
            for &id in ids {
                assert!(id < space.k());
            }
        }
        // Duplicate within a run collapses in the set view.
        assert_eq!(space.assignments[0], BTreeSet::from([0, 1]));
    }

    #[test]
    fn answers_cluster_with_reserved_empty_id() {
        let oracle = EquivalenceOracle::normalized();
        let answers = vec![
            "Paris".to_string(),
            "paris".to_string(),
            "Lyon".to_string(),
        ];
        assert_eq!(canonicalize_answers(&answers, &oracle).unwrap(), vec![0, 0, 1]);

        let empty = vec!["".to_string(), "".to_string()];
        let ids = canonicalize_answers(&empty, &oracle).unwrap();
        assert_eq!(ids[0], ids[1]);

        let judged = EquivalenceOracle::judge_backed_answers(&MockJudge);
        let answers = vec!["42".to_string(), "42 ".to_string()];
        assert_eq!(canonicalize_answers(&answers, &judged).unwrap(), vec![0, 0]);
    }

    #[test]
    fn vectors_follow_assignments() {
        let oracle = EquivalenceOracle::exact();
        let runs = vec![
            vec!["c1".to_string(), "c2".to_string()],
            vec!["c2".to_string()],
        ];
        let space = cluster_findings(&runs, &oracle).unwrap();
        let vectors = build_vectors(&space).unwrap();
        assert_eq!(vectors[0].entries(), &[1.0, 1.0]);
        assert_eq!(vectors[1].entries(), &[0.0, 1.0]);

        let answers = answer_space(&["a".to_string(), "a".to_string(), "b".to_string()], &oracle)
            .unwrap();
        let vectors = build_vectors(&answers).unwrap();
        assert_eq!(vectors[0].entries(), &[1.0, 0.0]);
        assert_eq!(vectors[2].entries(), &[0.0, 1.0]);

        // A run with no citations becomes the zero vector.
        let space = citation_space(&[vec!["http://a.com".to_string()], vec![]]);
        let vectors = build_vectors(&space).unwrap();
        assert_eq!(vectors[1].entries(), &[0.0]);
        assert_eq!(vectors[1].support_size(), 0);
    }

    #[test]
    fn identical_runs_produce_identical_vectors() {
        let urls = vec!["https://A.com/x/".to_string(), "https://a.com/x".to_string()];
        let space = citation_space(&[urls.clone(), urls]);
        assert_eq!(space.k(), 1);
        let vectors = build_vectors(&space).unwrap();
        assert_eq!(vectors[0], vectors[1]);
    }
}
