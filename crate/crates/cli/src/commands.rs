use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;

use tirlab::envsim::{read_tasks_jsonl, task_sets, train as train_run, write_tasks_jsonl, Algorithm, SyntheticTask, TrainRun};
use tirlab::reward::RewardVariant;

use crate::config::{ConfigError, RunConfig};
use crate::report::{self, Manifest, RunSummary};

fn read_tasks(path: &Path) -> Result<Vec<SyntheticTask>> {
    let file = File::open(path).with_context(|| format!("cannot open task file {}", path.display()))?;
    read_tasks_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Task files when configured, otherwise the generated sets for `task_seed`.
pub fn load_tasks(cfg: &RunConfig) -> Result<(Vec<SyntheticTask>, Vec<SyntheticTask>)> {
    let (generated_train, generated_eval) = task_sets(cfg.task_seed, &cfg.shape());
    let train = match &cfg.tasks {
        Some(p) => read_tasks(p)?,
        None => generated_train,
    };
    let eval = match &cfg.eval_tasks {
        Some(p) => read_tasks(p)?,
        None => generated_eval,
    };
    Ok((train, eval))
}

fn write_run(dir: &Path, cfg: &RunConfig, run: &TrainRun, command: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    run.write_metrics_jsonl(&mut metrics)?;
    metrics.flush()?;
    fs::write(dir.join("policy.json"), serde_json::to_string(&run.policy)?)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let manifest = Manifest::new(cfg, run.seed, command);
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (tasks, eval) = load_tasks(cfg)?;
    let run = train_run(&cfg.train_config(), cfg.seed, &tasks, &eval)?;
    write_run(&cfg.output_dir, cfg, &run, "train")?;
    let summary = RunSummary::from_run(&run, &[]);
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"));
    println!(
        "{} / {} seed {}: {} steps, final eval reward {}, parse success {}, exact match {} -> {}",
        cfg.algorithm,
        cfg.reward,
        cfg.seed,
        run.history.len(),
        show(summary.final_eval_reward),
        show(summary.final_parse_success),
        show(summary.final_exact_match),
        cfg.output_dir.display()
    );
    Ok(())
}

pub fn compare(
    cfg: &RunConfig,
    algorithms: &[Algorithm],
    rewards: &[RewardVariant],
    seeds: &[u64],
    parse_at: &[usize],
) -> Result<()> {
    let algorithms = if algorithms.is_empty() { vec![cfg.algorithm] } else { dedup(algorithms) };
    let rewards = if rewards.is_empty() { vec![cfg.reward] } else { dedup(rewards) };
    let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { dedup(seeds) };
    if algorithms.len() < 2 && rewards.len() < 2 {
        return Err(ConfigError("compare needs at least two algorithms or two reward variants".into()).into());
    }
    let (tasks, eval) = load_tasks(cfg)?;

    let jobs: Vec<RunConfig> = algorithms
        .iter()
        .flat_map(|&algorithm| rewards.iter().map(move |&reward| (algorithm, reward)))
        .flat_map(|(algorithm, reward)| {
            seeds.iter().map(move |&seed| RunConfig {
                algorithm,
                reward,
                seed,
                output_dir: cfg
                    .output_dir
                    .join("runs")
                    .join(format!("{algorithm}_{reward}_seed{seed}")),
                ..cfg.clone()
            })
        })
        .collect();

    let summaries: Vec<RunSummary> = jobs
        .par_iter()
        .map(|job| -> Result<RunSummary> {
            let run = train_run(&job.train_config(), job.seed, &tasks, &eval)?;
            write_run(&job.output_dir, job, &run, "compare")?;
            Ok(RunSummary::from_run(&run, parse_at))
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(&cfg.output_dir)?;
    report::write_runs_csv(&cfg.output_dir.join("runs.csv"), &summaries, parse_at)?;
    let arms = report::summarize_arms(&summaries, parse_at);
    report::write_summary_csv(&cfg.output_dir.join("summary.csv"), &arms, parse_at)?;
    let text = report::render_report(&arms, parse_at, seeds.len());
    fs::write(cfg.output_dir.join("report.txt"), &text)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    print!("{text}");
    Ok(())
}

fn dedup<T: PartialEq + Copy>(items: &[T]) -> Vec<T> {
    let mut out = Vec::new();
    for &x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

pub fn gen_tasks(cfg: &RunConfig) -> Result<()> {
    let (train, eval) = task_sets(cfg.task_seed, &cfg.shape());
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
    for (name, tasks) in [("train.jsonl", &train), ("eval.jsonl", &eval)] {
        let path = cfg.output_dir.join(name);
        let mut out = BufWriter::new(File::create(&path)?);
        write_tasks_jsonl(tasks, &mut out)?;
        out.flush()?;
        println!("wrote {} tasks to {}", tasks.len(), path.display());
    }
    Ok(())
}
