//! Reward components and progressive (staged) reward shaping.
//!
//! Short-form shaping unlocks the answer reward only once the trajectory is
//! fully parseable:
//!
//! ```text
//! total = process + format                 if process < 1
//!       = process + format + answer        otherwise
//! ```
//!
//! Long-form shaping inserts a judge stage between the two, and the general
//! combinator chains any number of stages, each contributing `sigmoid(R_k)`
//! once every earlier stage has met its threshold.

pub mod bleu;
pub mod judge;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{bleu, short_form_bleu, BleuError};
pub use judge::{HttpJudge, HttpJudgeConfig, JudgeClient, JudgeError, JudgeVerdict, MockJudge};

use crate::trajectory::ParseReport;

pub const FORMAT_BONUS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardVariant {
    /// Exact match on the extracted answer, 0 or 1.
    Binary,
    #[serde(alias = "prs")]
    PrsShort,
    PrsLong,
}

impl std::fmt::Display for RewardVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardVariant::Binary => "binary",
            RewardVariant::PrsShort => "prs-short",
            RewardVariant::PrsLong => "prs-long",
        })
    }
}

impl std::str::FromStr for RewardVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" | "em" => Ok(Self::Binary),
            "prs" | "prs-short" | "prs_short" => Ok(Self::PrsShort),
            "prs-long" | "prs_long" => Ok(Self::PrsLong),
            other => Err(format!("unknown reward variant `{other}` (expected binary, prs-short or prs-long)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub process: f64,
    pub format: f64,
    pub answer: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub judge: Option<f64>,
    pub total: f64,
}

impl RewardBreakdown {
    /// Recomputes `total` from the components under the given variant.
    pub fn recompute_total(&self, variant: RewardVariant, judge_pass_threshold: f64) -> f64 {
        let base = self.process + self.format;
        match variant {
            RewardVariant::Binary => self.answer,
            RewardVariant::PrsShort if self.process < 1.0 => base,
            RewardVariant::PrsShort => base + self.answer,
            RewardVariant::PrsLong => match self.judge {
                _ if self.process < 1.0 => base,
                Some(j) if j >= judge_pass_threshold => base + j + self.answer,
                Some(j) => base + j,
                None => base,
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("stage values ({values}) and stage spec ({stages}) differ in length")]
    StageMismatch { values: usize, stages: usize },
    #[error("stage spec must have at least one stage with finite thresholds")]
    InvalidStageSpec,
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// Lowercases, trims punctuation from both ends of every whitespace token
/// and re-joins with single spaces.
pub fn normalize_answer(text: &str) -> String {
    tokenize(text).join(" ")
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| tok.to_lowercase().trim_matches(|c: char| c.is_ascii_punctuation() || c.is_ascii_whitespace()).to_owned())
        .filter(|tok| !tok.is_empty())
        .collect()
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    if normalize_answer(pred) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

pub fn process_reward(report: &ParseReport) -> f64 {
    match (report.all_tool_calls_parseable, report.answer_parseable) {
        (true, true) => 1.0,
        (true, false) => 0.0,
        _ => -1.0,
    }
}

pub fn format_reward(report: &ParseReport) -> f64 {
    if report.format_complete {
        FORMAT_BONUS
    } else {
        0.0
    }
}

/// Short-form BLEU over normalized tokens; 0 when either side is empty.
pub fn answer_reward(pred: &str, gold: &str) -> f64 {
    let (p, g) = (tokenize(pred), tokenize(gold));
    short_form_bleu(&p, &g).unwrap_or(0.0)
}

pub fn binary_reward(report: &ParseReport, pred: Option<&str>, gold: &str) -> RewardBreakdown {
    let em = pred.map_or(0.0, |p| exact_match(p, gold));
    RewardBreakdown {
        process: process_reward(report),
        format: format_reward(report),
        answer: em,
        judge: None,
        total: em,
    }
}

pub fn prs_short(report: &ParseReport, pred: &str, gold: &str) -> RewardBreakdown {
    let process = process_reward(report);
    let format = format_reward(report);
    let (answer, total) = if process < 1.0 {
        (0.0, process + format)
    } else {
        let a = answer_reward(pred, gold);
        (a, process + format + a)
    };
    RewardBreakdown {
        process,
        format,
        answer,
        judge: None,
        total,
    }
}

/// Long-form shaping. The judge is consulted only when the trajectory is
/// fully parseable; a judge failure is returned to the caller unchanged.
pub fn prs_long(
    report: &ParseReport,
    question: &str,
    pred: &str,
    gold: &str,
    judge: &dyn JudgeClient,
) -> Result<RewardBreakdown, RewardError> {
    let process = process_reward(report);
    let format = format_reward(report);
    let base = process + format;
    if process < 1.0 {
        return Ok(RewardBreakdown {
            process,
            format,
            answer: 0.0,
            judge: None,
            total: base,
        });
    }
    let verdict = judge.score(question, pred, gold)?;
    let j = verdict.score;
    let (answer, total) = if j >= judge.pass_threshold() {
        let a = answer_reward(pred, gold);
        (a, base + j + a)
    } else {
        (0.0, base + j)
    };
    Ok(RewardBreakdown {
        process,
        format,
        answer,
        judge: Some(j),
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub threshold: f64,
}

/// Ordered reward stages with the threshold each must reach to unlock the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    stages: Vec<Stage>,
}

impl StageSpec {
    pub fn new(stages: Vec<Stage>) -> Result<Self, RewardError> {
        if stages.is_empty() || stages.iter().any(|s| !s.threshold.is_finite()) {
            return Err(RewardError::InvalidStageSpec);
        }
        Ok(Self { stages })
    }

    pub fn from_thresholds(thresholds: &[f64]) -> Result<Self, RewardError> {
        Self::new(
            thresholds
                .iter()
                .enumerate()
                .map(|(i, &threshold)| Stage {
                    name: format!("stage{}", i + 1),
                    threshold,
                })
                .collect(),
        )
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `R_1 + sum_{k>=2} [R_j >= eps_j for all j < k] * sigmoid(R_k)`.
pub fn prs_general(stage_values: &[f64], spec: &StageSpec) -> Result<f64, RewardError> {
    if stage_values.len() != spec.len() {
        return Err(RewardError::StageMismatch {
            values: stage_values.len(),
            stages: spec.len(),
        });
    }
    let mut total = stage_values[0];
    for k in 1..stage_values.len() {
        let unlocked = (0..k).all(|j| stage_values[j] >= spec.stages[j].threshold);
        if !unlocked {
            break;
        }
        total += sigmoid(stage_values[k]);
    }
    Ok(total)
}
