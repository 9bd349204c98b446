use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use tirlab::envsim::{steps_to_plateau, steps_to_threshold, TrainRun};

use crate::config::RunConfig;

pub const PARSE_TARGET: f64 = 0.9;

/// Enough to rerun: `tirlab train --config <dir>/config.toml` reproduces the
/// run when the config hash and version match.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub algorithm: String,
    pub reward: String,
    pub config_sha256: String,
    pub config_file: &'static str,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, seed: u64, command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_owned(),
            seed,
            algorithm: cfg.algorithm.to_string(),
            reward: cfg.reward.to_string(),
            config_sha256: cfg.hash(),
            config_file: "config.toml",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub algorithm: String,
    pub reward: String,
    pub seed: u64,
    pub final_eval_reward: Option<f64>,
    pub final_parse_success: Option<f64>,
    pub final_exact_match: Option<f64>,
    pub steps_to_plateau: Option<usize>,
    pub steps_to_parse90: Option<usize>,
    pub max_grad_norm: f64,
    /// Parse success at the last evaluation at or before each requested step.
    pub parse_at: Vec<Option<f64>>,
}

impl RunSummary {
    pub fn from_run(run: &TrainRun, parse_at: &[usize]) -> Self {
        let final_eval = run.final_eval();
        let parse_curve = run.eval_curve(|m| m.eval_parse_success);
        Self {
            algorithm: run.config.algorithm.to_string(),
            reward: run.config.reward.to_string(),
            seed: run.seed,
            final_eval_reward: final_eval.map(|e| e.mean_reward),
            final_parse_success: final_eval.map(|e| e.parse_success),
            final_exact_match: final_eval.map(|e| e.exact_match),
            steps_to_plateau: steps_to_plateau(&run.eval_curve(|m| m.eval_reward)),
            steps_to_parse90: steps_to_threshold(&parse_curve, PARSE_TARGET),
            max_grad_norm: run.history.iter().map(|m| m.grad_norm).fold(0.0, f64::max),
            parse_at: parse_at
                .iter()
                .map(|&k| parse_curve.iter().rev().find(|p| p.0 <= k).map(|p| p.1))
                .collect(),
        }
    }
}

/// Medians over the seeds of one algorithm x reward arm. A step count that
/// a run never reaches counts as infinite and renders as empty.
#[derive(Debug, Clone)]
pub struct ArmSummary {
    pub algorithm: String,
    pub reward: String,
    pub runs: usize,
    pub final_eval_reward: Option<f64>,
    pub final_parse_success: Option<f64>,
    pub final_exact_match: Option<f64>,
    pub steps_to_plateau: Option<f64>,
    pub steps_to_parse90: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub parse_at: Vec<Option<f64>>,
}

pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    let m = if v.len() % 2 == 0 { 0.5 * (v[mid - 1] + v[mid]) } else { v[mid] };
    m.is_finite().then_some(m)
}

fn steps(s: Option<usize>) -> f64 {
    s.map_or(f64::INFINITY, |s| s as f64)
}

pub fn summarize_arms(runs: &[RunSummary], parse_at: &[usize]) -> Vec<ArmSummary> {
    let mut arms: Vec<(String, String)> = Vec::new();
    for r in runs {
        let key = (r.algorithm.clone(), r.reward.clone());
        if !arms.contains(&key) {
            arms.push(key);
        }
    }
    arms.into_iter()
        .map(|(algorithm, reward)| {
            let group: Vec<&RunSummary> = runs
                .iter()
                .filter(|r| r.algorithm == algorithm && r.reward == reward)
                .collect();
            let opt = |f: fn(&RunSummary) -> Option<f64>| median(group.iter().map(|r| f(r).unwrap_or(f64::NAN)));
            ArmSummary {
                runs: group.len(),
                final_eval_reward: opt(|r| r.final_eval_reward),
                final_parse_success: opt(|r| r.final_parse_success),
                final_exact_match: opt(|r| r.final_exact_match),
                steps_to_plateau: median(group.iter().map(|r| steps(r.steps_to_plateau))),
                steps_to_parse90: median(group.iter().map(|r| steps(r.steps_to_parse90))),
                max_grad_norm: median(group.iter().map(|r| r.max_grad_norm)),
                parse_at: (0..parse_at.len())
                    .map(|i| median(group.iter().map(|r| r.parse_at[i].unwrap_or(f64::NAN))))
                    .collect(),
                algorithm,
                reward,
            }
        })
        .collect()
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

fn parse_columns(parse_at: &[usize]) -> Vec<String> {
    parse_at.iter().map(|k| format!("parse_success_at_{k}")).collect()
}

pub fn write_runs_csv(path: &Path, runs: &[RunSummary], parse_at: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "algorithm",
        "reward",
        "seed",
        "final_eval_reward",
        "final_parse_success",
        "final_exact_match",
        "steps_to_plateau",
        "steps_to_parse90",
        "max_grad_norm",
    ]
    .map(String::from)
    .to_vec();
    header.extend(parse_columns(parse_at));
    w.write_record(&header)?;
    for r in runs {
        let mut row = vec![
            r.algorithm.clone(),
            r.reward.clone(),
            r.seed.to_string(),
            fmt_opt(r.final_eval_reward),
            fmt_opt(r.final_parse_success),
            fmt_opt(r.final_exact_match),
            r.steps_to_plateau.map_or_else(String::new, |s| s.to_string()),
            r.steps_to_parse90.map_or_else(String::new, |s| s.to_string()),
            format!("{:.6}", r.max_grad_norm),
        ];
        row.extend(r.parse_at.iter().map(|p| fmt_opt(*p)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, arms: &[ArmSummary], parse_at: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "algorithm",
        "reward",
        "runs",
        "final_eval_reward",
        "final_parse_success",
        "final_exact_match",
        "steps_to_plateau",
        "steps_to_parse90",
        "max_grad_norm",
    ]
    .map(String::from)
    .to_vec();
    header.extend(parse_columns(parse_at));
    w.write_record(&header)?;
    for a in arms {
        let mut row = vec![
            a.algorithm.clone(),
            a.reward.clone(),
            a.runs.to_string(),
            fmt_opt(a.final_eval_reward),
            fmt_opt(a.final_parse_success),
            fmt_opt(a.final_exact_match),
            fmt_opt(a.steps_to_plateau),
            fmt_opt(a.steps_to_parse90),
            fmt_opt(a.max_grad_norm),
        ];
        row.extend(a.parse_at.iter().map(|p| fmt_opt(*p)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cell(v: Option<f64>, precision: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.precision$}"))
}

pub fn render_report(arms: &[ArmSummary], parse_at: &[usize], seeds: usize) -> String {
    let mut out = format!("Medians over {seeds} seed(s) per arm. '-' marks a target never reached.\n\n");
    let mut header = format!(
        "{:<12} {:<10} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}",
        "algorithm", "reward", "reward", "parse", "EM", "plateau", "parse90", "max|g|"
    );
    for k in parse_at {
        header.push_str(&format!(" {:>8}", format!("ps@{k}")));
    }
    out.push_str(&header);
    out.push('\n');
    for a in arms {
        let mut line = format!(
            "{:<12} {:<10} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}",
            a.algorithm,
            a.reward,
            cell(a.final_eval_reward, 3),
            cell(a.final_parse_success, 3),
            cell(a.final_exact_match, 3),
            cell(a.steps_to_plateau, 0),
            cell(a.steps_to_parse90, 0),
            cell(a.max_grad_norm, 4),
        );
        for p in &a.parse_at {
            line.push_str(&format!(" {:>8}", cell(*p, 3)));
        }
        out.push_str(&line);
        out.push('\n');
    }
    let fastest = arms
        .iter()
        .filter_map(|a| a.steps_to_plateau.map(|s| (s, a)))
        .min_by(|x, y| x.0.total_cmp(&y.0));
    if let Some((s, a)) = fastest {
        out.push_str(&format!("\nFirst to plateau: {} / {} at step {s:.0}.\n", a.algorithm, a.reward));
    }
    let best = arms
        .iter()
        .filter_map(|a| a.final_eval_reward.map(|r| (r, a)))
        .max_by(|x, y| x.0.total_cmp(&y.0));
    if let Some((r, a)) = best {
        out.push_str(&format!("Best final eval reward: {} / {} with {r:.3}.\n", a.algorithm, a.reward));
    }
    out
}
