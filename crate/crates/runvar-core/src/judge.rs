//! Text-generation judge transport.
//!
//! A [`Judge`] turns a prompt into a completion. Two implementations ship:
//! [`HttpJudge`] speaks a chat-completion-shaped HTTP protocol against a
//! configurable endpoint, and [`MockJudge`] is a deterministic rule-based
//! stand-in that lets the whole pipeline run offline and byte-reproducibly.
//!
//! Every request uses greedy decoding (temperature 0); that is fixed in the
//! request builder, not configurable, so evaluation verdicts stay stable.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
}

/// Connection settings for an HTTP judge.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JudgeTransport {
    pub endpoint: String,
    pub model_name: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Upper bound on concurrent in-flight requests.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Environment variable holding the bearer token, if the endpoint
    /// requires one.
    #[serde(default = "default_auth_env")]
    pub auth_env: String,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
}

fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    2
}
fn default_max_in_flight() -> usize {
    4
}
fn default_auth_env() -> String {
    "JUDGE_API_KEY".to_string()
}
fn default_backoff_ms() -> u64 {
    200
}

impl JudgeTransport {
    pub fn new(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            max_in_flight: default_max_in_flight(),
            auth_env: default_auth_env(),
            retry_backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ChatResponseMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

/// Completes prompts. Implementations must be deterministic for a fixed
/// prompt within one evaluation session.
pub trait Judge: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, JudgeError>;

    /// Maximum number of concurrent calls the implementation tolerates.
    fn max_in_flight(&self) -> usize {
        4
    }
}

/// HTTP judge speaking a chat-completion protocol.
pub struct HttpJudge {
    transport: JudgeTransport,
    client: reqwest::blocking::Client,
}

impl HttpJudge {
    pub fn new(transport: JudgeTransport) -> Result<Self, JudgeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(transport.timeout_secs))
            .build()
            .map_err(|e| JudgeError::Unavailable {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self { transport, client })
    }

    pub(crate) fn build_request(&self, prompt: &str) -> ChatRequest {
        ChatRequest {
            model: self.transport.model_name.clone(),
            messages: vec![ChatMessage {
                role: "user".to_string(),
                content: prompt.to_string(),
            }],
            // Greedy decoding, always. Not configurable.
            temperature: 0.0,
        }
    }

    fn attempt(&self, body: &ChatRequest) -> Result<String, String> {
        let mut req = self
            .client
            .post(&self.transport.endpoint)
            .json(body);
        if let Ok(token) = std::env::var(&self.transport.auth_env) {
            if !token.is_empty() {
                req = req.bearer_auth(token);
            }
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(format!("retryable status {status}"));
        }
        if !status.is_success() {
            // Client errors are not retried; surface them as-is.
            let text = resp.text().unwrap_or_default();
            return Err(format!("status {status}: {text}"));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| e.to_string())?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| "response carried no choices".to_string())
    }
}

impl Judge for HttpJudge {
    fn complete(&self, prompt: &str) -> Result<String, JudgeError> {
        let body = self.build_request(prompt);
        let attempts = self.transport.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            match self.attempt(&body) {
                Ok(content) => return Ok(content),
                Err(message) => {
                    let retryable = message.starts_with("retryable")
                        || message.contains("timed out")
                        || message.contains("error sending request")
                        || message.contains("connection");
                    last_error = message;
                    if !retryable {
                        break;
                    }
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(
                            self.transport.retry_backoff_ms * (attempt as u64 + 1),
                        ));
                    }
                }
            }
        }
        Err(JudgeError::Unavailable {
            attempts,
            message: last_error,
        })
    }

    fn max_in_flight(&self) -> usize {
        self.transport.max_in_flight
    }
}

// Marker strings the mock uses to recognise which template a prompt came
// from. They are distinctive lines of the shipped templates.
const CLAIM_MARKER: &str = "Extract all factual claims";
const ATOMIC_MARKER: &str = "independent, minimal atomic facts";
const ANSWER_MARKER: &str = "Extract the answer to the research question";
const EQUIV_MARKER: &str = "Reply yes/no";
const ATOMIC_TERMINATOR: &str = "return only a JSON array of strings:";

/// Deterministic offline judge.
///
/// Recognises the shipped prompt templates by marker lines and answers with
/// simple text rules: claims are the report's sentence lines with citation
/// markers resolved against a trailing reference list, atomic facts are
/// conjunction splits, the answer is an `Answer:` line, and equivalence is
/// case-insensitive trimmed string equality. Identical prompts always yield
/// byte-identical completions.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockJudge;

impl MockJudge {
    fn reference_urls(report: &str) -> Vec<(String, String)> {
        let mut refs = Vec::new();
        for line in report.lines() {
            let trimmed = line.trim();
            if let Some(rest) = trimmed.strip_prefix('[') {
                if let Some((num, url)) = rest.split_once(']') {
                    let url = url.trim();
                    if num.chars().all(|c| c.is_ascii_digit()) && url.starts_with("http") {
                        refs.push((num.to_string(), url.to_string()));
                    }
                }
            }
        }
        refs
    }

    fn claims_payload(report: &str) -> String {
        let refs = Self::reference_urls(report);
        let mut claims = Vec::new();
        for line in report.lines() {
            let trimmed = line.trim();
            if trimmed.is_empty()
                || trimmed.starts_with("Answer:")
                || (trimmed.starts_with('[') && trimmed.contains("] http"))
            {
                continue;
            }
            let mut claim_text = trimmed.to_string();
            let mut source = String::new();
            // Trailing citation marker "[k]" resolved via the reference list.
            if let Some(open) = claim_text.rfind('[') {
                if claim_text.ends_with(']') {
                    let key = &claim_text[open + 1..claim_text.len() - 1];
                    if let Some((_, url)) = refs.iter().find(|(num, _)| num == key) {
                        source = url.clone();
                        claim_text.truncate(open);
                        claim_text = claim_text.trim_end().to_string();
                    }
                }
            }
            if source.is_empty() {
                if let Some(pos) = trimmed.find("http") {
                    let url: String = trimmed[pos..]
                        .split_whitespace()
                        .next()
                        .unwrap_or("")
                        .trim_end_matches(['.', ',', ';', ')'])
                        .to_string();
                    if url.starts_with("http") {
                        source = url;
                    }
                }
            }
            claims.push(serde_json::json!({
                "claim": claim_text,
                "context": trimmed,
                "source": source,
            }));
        }
        serde_json::to_string(&claims).expect("claim payload serializes")
    }

    fn atomic_payload(claim: &str) -> String {
        let mut facts = Vec::new();
        for part in claim.split("; ") {
            for fact in part.split(" and ") {
                let fact = fact.trim().trim_end_matches('.').trim();
                if !fact.is_empty() {
                    facts.push(format!("{fact}."));
                }
            }
        }
        if facts.is_empty() {
            facts.push(claim.trim().to_string());
        }
        serde_json::to_string(&facts).expect("atomic payload serializes")
    }

    fn answer_payload(question: &str, report: &str) -> String {
        let mut answer = String::new();
        let mut context = String::new();
        for line in report.lines() {
            if let Some(rest) = line.trim().strip_prefix("Answer:") {
                answer = rest.trim().to_string();
                context = line.trim().to_string();
                break;
            }
        }
        serde_json::to_string(&serde_json::json!({
            "question": question,
            "answer": answer,
            "supporting_context": context,
        }))
        .expect("answer payload serializes")
    }

    fn equivalence_payload(prompt: &str) -> String {
        let mut a = None;
        let mut b = None;
        for line in prompt.lines() {
            if let Some(rest) = line.strip_prefix("A: ") {
                a = Some(rest);
            } else if let Some(rest) = line.strip_prefix("B: ") {
                b = Some(rest);
            }
        }
        match (a, b) {
            (Some(a), Some(b)) => {
                if a.trim().to_lowercase() == b.trim().to_lowercase() {
                    "yes".to_string()
                } else {
                    "no".to_string()
                }
            }
            _ => "no".to_string(),
        }
    }

    fn question_and_report(prompt: &str) -> (String, String) {
        let question = prompt
            .rfind("Research Question: ")
            .map(|pos| {
                prompt[pos + "Research Question: ".len()..]
                    .lines()
                    .next()
                    .unwrap_or("")
                    .to_string()
            })
            .unwrap_or_default();
        let report = prompt
            .rfind("Report:\n")
            .map(|pos| prompt[pos + "Report:\n".len()..].to_string())
            .unwrap_or_default();
        (question, report)
    }
}

impl Judge for MockJudge {
    fn complete(&self, prompt: &str) -> Result<String, JudgeError> {
        if prompt.contains(ATOMIC_MARKER) {
            let claim = prompt
                .rfind(ATOMIC_TERMINATOR)
                .map(|pos| prompt[pos + ATOMIC_TERMINATOR.len()..].trim())
                .unwrap_or("");
            return Ok(Self::atomic_payload(claim));
        }
        if prompt.contains(CLAIM_MARKER) {
            let (_, report) = Self::question_and_report(prompt);
            return Ok(Self::claims_payload(&report));
        }
        if prompt.contains(ANSWER_MARKER) {
            let (question, report) = Self::question_and_report(prompt);
            return Ok(Self::answer_payload(&question, &report));
        }
        if prompt.contains(EQUIV_MARKER) {
            return Ok(Self::equivalence_payload(prompt));
        }
        Err(JudgeError::Unavailable {
            attempts: 1,
            message: "mock judge does not recognise this prompt".to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn http_requests_always_use_greedy_decoding() {
        let judge =
            HttpJudge::new(JudgeTransport::new("http://localhost:9/v1/chat", "m")).unwrap();
        let req = judge.build_request("hello");
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.messages.len(), 1);
        assert_eq!(req.messages[0].role, "user");
        let body = serde_json::to_string(&req).unwrap();
        assert!(body.contains("\"temperature\":0.0"));
    }

    #[test]
    fn mock_is_deterministic() {
        let prompt = format!(
            "{}\n\nResearch Question: q\n\nReport:\nFact one [1].\n[1] http://a.com/x\n",
            CLAIM_MARKER
        );
        let a = MockJudge.complete(&prompt).unwrap();
        let b = MockJudge.complete(&prompt).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mock_resolves_citation_markers() {
        let prompt = format!(
            "{}\n\nResearch Question: q\n\nReport:\nX won in 2019 [1].\nNo source here.\n[1] http://example.com/win\n",
            CLAIM_MARKER
        );
        let raw = MockJudge.complete(&prompt).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&raw).unwrap();
        let arr = parsed.as_array().unwrap();
        assert_eq!(arr.len(), 2);
        assert_eq!(arr[0]["claim"], "X won in 2019");
        assert_eq!(arr[0]["source"], "http://example.com/win");
        assert_eq!(arr[1]["source"], "");
    }

    #[test]
    fn mock_splits_conjunctions_into_atomic_facts() {
        let prompt = format!(
            "facts that can each be\nindependent, minimal atomic facts stub {}\n The EU approved the AI Act in 2024 and introduced new compliance requirements.",
            ATOMIC_TERMINATOR
        );
        let raw = MockJudge.complete(&prompt).unwrap();
        let facts: Vec<String> = serde_json::from_str(&raw).unwrap();
        assert_eq!(facts.len(), 2);
        assert_eq!(facts[0], "The EU approved the AI Act in 2024.");
    }

    #[test]
    fn mock_equivalence_is_casefold_trim_equality() {
        let prompt = format!("{EQUIV_MARKER}\n\nA: Paris \nB: paris\n");
        assert_eq!(MockJudge.complete(&prompt).unwrap(), "yes");
        let prompt = format!("{EQUIV_MARKER}\n\nA: Paris\nB: Lyon\n");
        assert_eq!(MockJudge.complete(&prompt).unwrap(), "no");
    }

    #[test]
    fn mock_rejects_unknown_prompts() {
        assert!(MockJudge.complete("what is the weather").is_err());
    }
}
