use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use tirlab::reward::{
    binary_reward, prs_long, prs_short, HttpJudge, JudgeClient, MockJudge, RewardBreakdown, RewardVariant,
};
use tirlab::trajectory::{extract_answer, parse_trajectory, TagScheme};

use crate::config::RunConfig;

#[derive(Debug, Deserialize)]
struct TranscriptRecord {
    id: String,
    raw: String,
    #[serde(default)]
    gold_answer: Option<String>,
    #[serde(default)]
    question: Option<String>,
}

#[derive(Debug, Deserialize)]
struct GoldRecord {
    id: String,
    gold_answer: String,
}

#[derive(Debug, Serialize)]
struct ScoredRecord<'a> {
    id: &'a str,
    #[serde(flatten)]
    breakdown: RewardBreakdown,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| anyhow!("{}: line {}: malformed record: {e}", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn score(cfg: &RunConfig, trajectories: &Path, gold: Option<&Path>, output: Option<&Path>) -> Result<()> {
    let records: Vec<TranscriptRecord> = read_jsonl(trajectories)?;
    let gold: BTreeMap<String, String> = match gold {
        Some(p) => read_jsonl::<GoldRecord>(p)?
            .into_iter()
            .map(|g| (g.id, g.gold_answer))
            .collect(),
        None => BTreeMap::new(),
    };
    let golds: Vec<&str> = records
        .iter()
        .map(|r| {
            gold.get(&r.id)
                .or(r.gold_answer.as_ref())
                .map(String::as_str)
                .ok_or_else(|| anyhow!("no gold answer for id `{}`", r.id))
        })
        .collect::<Result<_>>()?;

    let judge: Box<dyn JudgeClient> = match cfg.http_judge() {
        Some(http) if cfg.reward == RewardVariant::PrsLong => Box::new(HttpJudge::new(http)),
        _ => Box::new(MockJudge {
            cutoff: cfg.judge_cutoff,
        }),
    };
    let scheme = TagScheme::default();
    let breakdowns: Vec<RewardBreakdown> = records
        .par_iter()
        .zip(&golds)
        .map(|(rec, gold)| {
            let (traj, report) = parse_trajectory(&rec.raw, &scheme);
            let pred = extract_answer(&traj);
            Ok(match cfg.reward {
                RewardVariant::Binary => binary_reward(&report, pred.as_deref(), gold),
                RewardVariant::PrsShort => prs_short(&report, pred.as_deref().unwrap_or(""), gold),
                RewardVariant::PrsLong => {
                    let question = rec.question.as_deref().unwrap_or("");
                    prs_long(&report, question, pred.as_deref().unwrap_or(""), gold, judge.as_ref())
                        .with_context(|| format!("scoring id `{}`", rec.id))?
                }
            })
        })
        .collect::<Result<_>>()?;

    let mut out: Box<dyn Write> = match output {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for (rec, breakdown) in records.iter().zip(breakdowns) {
        serde_json::to_writer(&mut out, &ScoredRecord { id: &rec.id, breakdown })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
