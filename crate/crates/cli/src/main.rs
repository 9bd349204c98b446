mod commands;
mod config;
mod report;
mod score;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigError;
use tirlab::envsim::Algorithm;
use tirlab::reward::RewardVariant;

#[derive(Parser)]
#[command(name = "tirlab", version, about = "Reward shaping and value-based sampling experiments on a synthetic tool-use task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; keys may also be set through TIRLAB_<KEY> variables.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and write metrics, the final policy and a manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[arg(long)]
        reward: Option<RewardVariant>,
    },
    /// Run every algorithm x reward x seed combination and summarize them.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated, e.g. `grpo,vspo`. Defaults to the config's algorithm.
        #[arg(long, value_delimiter = ',')]
        algorithms: Vec<Algorithm>,
        /// Comma-separated, e.g. `binary,prs-short`. Defaults to the config's reward.
        #[arg(long, value_delimiter = ',')]
        rewards: Vec<RewardVariant>,
        /// Comma-separated training seeds. Defaults to the config's `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Steps at which to report parse success in the summary.
        #[arg(long, value_delimiter = ',', default_value = "10,25,50,100")]
        parse_at: Vec<usize>,
    },
    /// Score transcripts offline and write one reward breakdown per line.
    Score {
        #[command(flatten)]
        config: ConfigArgs,
        /// JSONL with `id`, `raw` and optionally `gold_answer` and `question`.
        #[arg(long)]
        trajectories: PathBuf,
        /// JSONL with `id` and `gold_answer`; takes precedence over inline answers.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        reward: Option<RewardVariant>,
        /// Output file; defaults to stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Write the generated train and eval task sets as JSONL. `--seed` sets
    /// the task seed here.
    GenTasks {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_owned(), v.trim().to_owned()))
}

impl ConfigArgs {
    fn resolve(&self, extra: Vec<(String, String)>) -> Result<config::RunConfig, ConfigError> {
        self.resolve_with_seed_key("seed", extra)
    }

    fn resolve_with_seed_key(&self, seed_key: &str, extra: Vec<(String, String)>) -> Result<config::RunConfig, ConfigError> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push((seed_key.into(), seed.to_string()));
        }
        if let Some(steps) = self.steps {
            overrides.push(("steps".into(), steps.to_string()));
        }
        if let Some(dir) = &self.output_dir {
            overrides.push(("output_dir".into(), dir.display().to_string()));
        }
        overrides.extend(extra);
        config::resolve(self.config.as_deref(), |k| std::env::var(k).ok(), &overrides)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            algorithm,
            reward,
        } => {
            let mut extra = Vec::new();
            if let Some(a) = algorithm {
                extra.push(("algorithm".into(), a.to_string()));
            }
            if let Some(r) = reward {
                extra.push(("reward".into(), r.to_string()));
            }
            commands::train(&config.resolve(extra)?)
        }
        Command::Compare {
            config,
            algorithms,
            rewards,
            seeds,
            parse_at,
        } => {
            let cfg = config.resolve(Vec::new())?;
            commands::compare(&cfg, &algorithms, &rewards, &seeds, &parse_at)
        }
        Command::Score {
            config,
            trajectories,
            gold,
            reward,
            output,
        } => {
            let mut extra = Vec::new();
            if let Some(r) = reward {
                extra.push(("reward".into(), r.to_string()));
            }
            let cfg = config.resolve(extra)?;
            score::score(&cfg, &trajectories, gold.as_deref(), output.as_deref())
        }
        Command::GenTasks { config } => commands::gen_tasks(&config.resolve_with_seed_key("task_seed", Vec::new())?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
