//! Turns a raw final report into a [`RunArtifact`] by prompting a judge with
//! versioned templates: claim extraction, atomic-fact decomposition, and
//! direct-answer extraction. Citations are harvested from both claim sources
//! and a URL scan of the report text.
//!
//! Template assets live under `assets/prompts/` and are referenced by
//! version; editing one requires a version bump so recorded metadata keeps
//! identifying exactly what ran.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{Judge, JudgeError};
use crate::mitigate::{validate_value, FieldSpec, FieldType, MitigateError, SchemaDescriptor};

pub const CLAIM_TEMPLATE: &str = include_str!("../assets/prompts/claim_extraction_v1.txt");
pub const ATOMIC_TEMPLATE: &str = include_str!("../assets/prompts/atomic_decomposition_v1.txt");
pub const ANSWER_TEMPLATE: &str = include_str!("../assets/prompts/answer_extraction_v1.txt");
pub const ANSWER_EQUIV_TEMPLATE: &str = include_str!("../assets/prompts/answer_equivalence_v1.txt");
pub const FINDING_EQUIV_TEMPLATE: &str =
    include_str!("../assets/prompts/finding_equivalence_v1.txt");

/// Template versions recorded into run metadata.
pub const PROMPT_VERSIONS: &[(&str, &str)] = &[
    ("claim_extraction", "v1"),
    ("atomic_decomposition", "v1"),
    ("answer_extraction", "v1"),
    ("answer_equivalence", "v1"),
    ("finding_equivalence", "v1"),
];

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("oracle unavailable: {0}")]
    OracleUnavailable(#[from] JudgeError),
    #[error("judge response violates the expected format at byte {offset}: {message}")]
    JudgeFormat {
        offset: usize,
        message: String,
        raw: String,
    },
}

/// One extracted claim with its surrounding text and source URL (empty when
/// the claim carried no citation).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub claim: String,
    pub context: String,
    pub source: String,
}

/// Everything extracted from one run's report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub run_id: String,
    pub answer: String,
    pub claims: Vec<Claim>,
    /// Atomic findings, in claim order; every finding originates from
    /// exactly one claim.
    pub findings: Vec<String>,
    /// Raw citation URLs before normalization: claim sources first, then
    /// URLs scanned from the report.
    pub citations: Vec<String>,
    pub accuracy: Option<bool>,
}

/// One line of a report ingestion file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRecord {
    pub question_id: String,
    pub run_id: String,
    pub question: String,
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
}

/// Reads a structured-line (one JSON record per line) report file.
pub fn read_report_lines(content: &str) -> Result<Vec<ReportRecord>, ExtractError> {
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ReportRecord =
            serde_json::from_str(line).map_err(|e| ExtractError::JudgeFormat {
                offset: 0,
                message: format!("report line {}: {e}", i + 1),
                raw: line.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

fn claims_schema() -> SchemaDescriptor {
    SchemaDescriptor::array_of_objects(
        "claims",
        "v1",
        vec![
            FieldSpec::required("claim", FieldType::String),
            FieldSpec::required("context", FieldType::String),
            FieldSpec::required("source", FieldType::String),
        ],
    )
}

fn atomic_schema() -> SchemaDescriptor {
    SchemaDescriptor::array_of_strings("atomic_facts", "v1")
}

fn answer_schema() -> SchemaDescriptor {
    SchemaDescriptor::object(
        "answer",
        "v1",
        vec![
            FieldSpec::optional("question", FieldType::String),
            FieldSpec::required("answer", FieldType::String),
            FieldSpec::required("supporting_context", FieldType::String),
        ],
    )
}

fn line_col_to_offset(raw: &str, line: usize, column: usize) -> usize {
    let mut offset = 0usize;
    for (i, l) in raw.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset.min(raw.len())
}

/// Strips code fences and surrounding prose, keeping the outermost JSON
/// array or object, and removes trailing commas before closers. This is the
/// single permitted repair pass.
fn repair_payload(raw: &str) -> String {
    let mut text = raw.trim();
    if let Some(start) = text.find("```") {
        let after = &text[start + 3..];
        let after = after.strip_prefix("json").unwrap_or(after);
        if let Some(end) = after.find("```") {
            text = after[..end].trim();
        }
    }
    let array = text.find('[').and_then(|s| text.rfind(']').map(|e| (s, e)));
    let object = text.find('{').and_then(|s| text.rfind('}').map(|e| (s, e)));
    let slice = match (array, object) {
        (Some((s1, e1)), Some((s2, e2))) => {
            if s1 < s2 {
                &text[s1..=e1.max(e2)]
            } else {
                &text[s2..=e2.max(e1)]
            }
        }
        (Some((s, e)), None) | (None, Some((s, e))) => &text[s..=e],
        (None, None) => text,
    };
    static TRAILING_COMMA: OnceLock<Regex> = OnceLock::new();
    let re = TRAILING_COMMA.get_or_init(|| Regex::new(r",\s*([\]}])").expect("valid regex"));
    re.replace_all(slice, "$1").into_owned()
}

/// Strict parse of a judge payload against a schema, with one repair pass
/// for fenced or comma-damaged output.
pub fn parse_structured_response(
    raw: &str,
    schema: &SchemaDescriptor,
) -> Result<serde_json::Value, ExtractError> {
    let strict: Result<serde_json::Value, serde_json::Error> = serde_json::from_str(raw);
    let (value, basis) = match strict {
        Ok(v) => (v, raw.to_string()),
        Err(first_err) => {
            let repaired = repair_payload(raw);
            match serde_json::from_str::<serde_json::Value>(&repaired) {
                Ok(v) => (v, repaired),
                Err(_) => {
                    return Err(ExtractError::JudgeFormat {
                        offset: line_col_to_offset(raw, first_err.line(), first_err.column()),
                        message: first_err.to_string(),
                        raw: raw.to_string(),
                    });
                }
            }
        }
    };
    validate_value(&value, schema).map_err(|e| match e {
        MitigateError::SchemaViolation { path, detail } => {
            // Best-effort byte offset: locate the violating field name.
            let field = path.rsplit('.').next().unwrap_or("");
            let offset = basis.find(&format!("\"{field}\"")).unwrap_or(0);
            ExtractError::JudgeFormat {
                offset,
                message: format!("{path}: {detail}"),
                raw: raw.to_string(),
            }
        }
        MitigateError::NoProposals => unreachable!("schema validation never yields NoProposals"),
    })?;
    Ok(value)
}

fn claim_prompt(question: &str, report: &str) -> String {
    format!("{CLAIM_TEMPLATE}\n\nResearch Question: {question}\n\nReport:\n{report}\n")
}

fn atomic_prompt(claim: &str) -> String {
    format!("{ATOMIC_TEMPLATE}\n{claim}\n")
}

fn answer_prompt(question: &str, report: &str) -> String {
    format!("{ANSWER_TEMPLATE}\n\nResearch Question: {question}\n\nReport:\n{report}\n")
}

pub(crate) fn equivalence_prompt(template: &str, a: &str, b: &str) -> String {
    format!("{template}\n\nA: {a}\nB: {b}\n")
}

/// Extracts `{claim, context, source}` records from a report.
pub fn extract_claims(
    question: &str,
    report: &str,
    judge: &dyn Judge,
) -> Result<Vec<Claim>, ExtractError> {
    let raw = judge.complete(&claim_prompt(question, report))?;
    let value = parse_structured_response(&raw, &claims_schema())?;
    let claims = value
        .as_array()
        .expect("schema guarantees an array")
        .iter()
        .map(|item| Claim {
            claim: item["claim"].as_str().unwrap_or_default().to_string(),
            context: item["context"].as_str().unwrap_or_default().to_string(),
            source: item["source"].as_str().unwrap_or_default().to_string(),
        })
        .collect();
    Ok(claims)
}

/// Decomposes one claim into independent minimal atomic facts.
pub fn decompose_atomic(claim: &str, judge: &dyn Judge) -> Result<Vec<String>, ExtractError> {
    let raw = judge.complete(&atomic_prompt(claim))?;
    let value = parse_structured_response(&raw, &atomic_schema())?;
    Ok(value
        .as_array()
        .expect("schema guarantees an array")
        .iter()
        .map(|v| v.as_str().unwrap_or_default().to_string())
        .collect())
}

/// Extracts the direct answer and its supporting context. Open-ended
/// reports may legitimately yield an empty answer.
pub fn extract_answer(
    question: &str,
    report: &str,
    judge: &dyn Judge,
) -> Result<(String, String), ExtractError> {
    let raw = judge.complete(&answer_prompt(question, report))?;
    let value = parse_structured_response(&raw, &answer_schema())?;
    Ok((
        value["answer"].as_str().unwrap_or_default().to_string(),
        value["supporting_context"]
            .as_str()
            .unwrap_or_default()
            .to_string(),
    ))
}

/// True when the extracted answer matches the gold answer. Trimmed
/// case-insensitive equality short-circuits without a judge call; otherwise
/// the judge arbitrates with a yes/no verdict.
pub fn grade_accuracy(
    extracted: &str,
    gold: &str,
    judge: &dyn Judge,
) -> Result<bool, ExtractError> {
    if extracted.trim().eq_ignore_ascii_case(gold.trim()) {
        return Ok(true);
    }
    let raw = judge.complete(&equivalence_prompt(ANSWER_EQUIV_TEMPLATE, extracted, gold))?;
    let verdict = raw.trim().to_lowercase();
    if verdict.starts_with("yes") {
        Ok(true)
    } else if verdict.starts_with("no") {
        Ok(false)
    } else {
        Err(ExtractError::JudgeFormat {
            offset: 0,
            message: "expected a yes/no verdict".to_string(),
            raw,
        })
    }
}

fn url_regex() -> &'static Regex {
    static URL_RE: OnceLock<Regex> = OnceLock::new();
    URL_RE.get_or_init(|| Regex::new(r#"https?://[^\s<>"'\)\]]+"#).expect("valid regex"))
}

/// All URLs appearing in free text, in order, with trailing punctuation
/// trimmed.
pub fn scan_urls(text: &str) -> Vec<String> {
    url_regex()
        .find_iter(text)
        .map(|m| m.as_str().trim_end_matches(['.', ',', ';', ':', '!', '?']).to_string())
        .collect()
}

/// Runs `f` over `items` with at most `max_in_flight` worker threads,
/// assembling results in input order. Results are deterministic in content
/// regardless of completion order.
pub(crate) fn bounded_map<T, U, F>(items: &[T], max_in_flight: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let workers = max_in_flight.max(1).min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut collected: Vec<(usize, U)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        local.push((i, f(&items[i])));
                    }
                    local
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("judge worker panicked"))
            .collect()
    });
    collected.sort_by_key(|(i, _)| *i);
    collected.into_iter().map(|(_, u)| u).collect()
}

/// Full artifact extraction for one run: claims, findings via atomic
/// decomposition (bounded-parallel across claims), citation harvest, answer,
/// and accuracy against an optional gold answer.
pub fn extract_artifact(
    run_id: &str,
    question: &str,
    report: &str,
    gold_answer: Option<&str>,
    judge: &dyn Judge,
) -> Result<RunArtifact, ExtractError> {
    let claims = extract_claims(question, report, judge)?;
    let decomposed: Vec<Result<Vec<String>, ExtractError>> =
        bounded_map(&claims, judge.max_in_flight(), |claim| {
            decompose_atomic(&claim.claim, judge)
        });
    let mut findings = Vec::new();
    for result in decomposed {
        findings.extend(result?);
    }
    let mut citations: Vec<String> = claims
        .iter()
        .filter(|c| !c.source.is_empty())
        .map(|c| c.source.clone())
        .collect();
    citations.extend(scan_urls(report));
    let (answer, _context) = extract_answer(question, report, judge)?;
    let accuracy = match gold_answer {
        Some(gold) if !gold.trim().is_empty() => Some(grade_accuracy(&answer, gold, judge)?),
        _ => None,
    };
    Ok(RunArtifact {
        run_id: run_id.to_string(),
        answer,
        claims,
        findings,
        citations,
        accuracy,
    })
}
