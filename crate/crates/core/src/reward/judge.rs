//! Answer judges for long-form shaping: a deterministic token-overlap mock
//! and an HTTP client for an external grading service.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: f64,
    pub rationale: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(String),
    #[error("invalid judge request: {0}")]
    InvalidRequest(String),
}

/// Grades an answer against a reference. Implementations must be shareable
/// across scoring threads.
pub trait JudgeClient: Send + Sync {
    fn score(&self, question: &str, answer: &str, reference: &str) -> Result<JudgeVerdict, JudgeError>;

    /// Minimum score that unlocks the answer-alignment stage.
    fn pass_threshold(&self) -> f64 {
        1.0
    }
}

fn check_request(question: &str, reference: &str) -> Result<(), JudgeError> {
    if question.trim().is_empty() {
        return Err(JudgeError::InvalidRequest("empty question".into()));
    }
    if reference.trim().is_empty() {
        return Err(JudgeError::InvalidRequest("empty reference".into()));
    }
    Ok(())
}

/// Harmonic mean of token precision and recall over normalized tokens.
pub fn token_f1(answer: &str, reference: &str) -> f64 {
    let a = tokenize(answer);
    let r = tokenize(reference);
    if a.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &a {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / a.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Rule-based stand-in for a model judge: `Match` (1) iff token F1 against
/// the reference exceeds the cutoff, `Mismatch` (0) otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockJudge {
    pub cutoff: f64,
}

impl Default for MockJudge {
    fn default() -> Self {
        Self { cutoff: 0.6 }
    }
}

impl JudgeClient for MockJudge {
    fn score(&self, question: &str, answer: &str, reference: &str) -> Result<JudgeVerdict, JudgeError> {
        check_request(question, reference)?;
        let f1 = token_f1(answer, reference);
        let pass = f1 > self.cutoff;
        Ok(JudgeVerdict {
            score: if pass { 1.0 } else { 0.0 },
            rationale: format!(
                "token F1 {f1:.4} {} cutoff {:.4}: {}",
                if pass { ">" } else { "<=" },
                self.cutoff,
                if pass { "Match" } else { "Mismatch" }
            ),
        })
    }
}

pub const JUDGE_PROMPT_TEMPLATE_ID: &str = "qa-match-v1";

/// Grading prompt the external service is expected to render for
/// [`JUDGE_PROMPT_TEMPLATE_ID`]. The reply must end with a rating line.
pub const JUDGE_PROMPT_TEMPLATE: &str = "\
You grade answers produced by a question-answering agent.

Question: {question}
Agent response: {answer}
Reference answer: {reference}

Decide whether the agent response is semantically consistent with the reference answer.
If the question has several parts, every part must be answered consistently.
Reply with exactly one line and nothing else:
<Evaluation Rating>: Match
or
<Evaluation Rating>: Mismatch
";

pub fn render_judge_prompt(question: &str, answer: &str, reference: &str) -> String {
    JUDGE_PROMPT_TEMPLATE
        .replace("{question}", question)
        .replace("{answer}", answer)
        .replace("{reference}", reference)
}

const RATING_MARKER: &str = "<Evaluation Rating>:";

/// Finds the rating line in a judge reply. `Some(true)` for Match.
pub fn parse_rating(reply: &str) -> Option<bool> {
    let idx = reply.rfind(RATING_MARKER)?;
    let rest = reply[idx + RATING_MARKER.len()..].trim_start().to_ascii_lowercase();
    if rest.starts_with("mismatch") {
        Some(false)
    } else if rest.starts_with("match") {
        Some(true)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpJudgeConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub retries: u32,
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    question: &'a str,
    answer: &'a str,
    reference: &'a str,
    prompt_template_id: &'a str,
}

/// Client for an external judge endpoint. One agent is shared by all
/// scoring threads; each call carries its own timeout.
pub struct HttpJudge {
    config: HttpJudgeConfig,
    agent: ureq::Agent,
}

impl HttpJudge {
    pub fn new(config: HttpJudgeConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        Self { config, agent }
    }

    fn attempt(&self, body: &JudgeRequest<'_>) -> Result<JudgeVerdict, JudgeError> {
        let reply = self
            .agent
            .post(&self.config.endpoint)
            .send_json(body)
            .map_err(|e| JudgeError::Unavailable(e.to_string()))?
            .into_string()
            .map_err(|e| JudgeError::Unavailable(e.to_string()))?;
        match parse_rating(&reply) {
            Some(pass) => Ok(JudgeVerdict {
                score: if pass { 1.0 } else { 0.0 },
                rationale: reply,
            }),
            None => Err(JudgeError::Unavailable(format!("unparseable rating in reply: {reply:.200}"))),
        }
    }
}

impl JudgeClient for HttpJudge {
    fn score(&self, question: &str, answer: &str, reference: &str) -> Result<JudgeVerdict, JudgeError> {
        check_request(question, reference)?;
        let body = JudgeRequest {
            question,
            answer,
            reference,
            prompt_template_id: JUDGE_PROMPT_TEMPLATE_ID,
        };
        let mut last = None;
        for _ in 0..=self.config.retries {
            match self.attempt(&body) {
                Ok(v) => return Ok(v),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
