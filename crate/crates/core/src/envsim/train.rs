//! The training loop: rollouts, reward, advantages (plain or value-based
//! resampling), exact loss gradient and a plain gradient step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::{EnvConfig, ToyEnv};
use super::policy::ToyPolicy;
use super::task::SyntheticTask;
use super::EnvError;
use crate::grpo::{batch_loss, Batch, OptimConfig, RolloutGroup};
use crate::reward::{MockJudge, RewardVariant};
use crate::sampler::{vspo_transform, SamplerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Grpo,
    /// Value-based resampling with smoothing clipping.
    Vspo,
    /// Value-based resampling, each copy at full weight.
    VspoNoClip,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Grpo => "grpo",
            Algorithm::Vspo => "vspo",
            Algorithm::VspoNoClip => "vspo-noclip",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grpo" => Ok(Self::Grpo),
            "vspo" => Ok(Self::Vspo),
            "vspo-noclip" | "vspo_noclip" => Ok(Self::VspoNoClip),
            other => Err(format!("unknown algorithm `{other}` (expected grpo, vspo or vspo-noclip)")),
        }
    }
}

/// Default step size for the tabular policy. The per-token loss scaling
/// makes each logit's gradient tiny, so this is far above LLM-scale rates.
pub const TOY_LEARNING_RATE: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub algorithm: Algorithm,
    pub reward: RewardVariant,
    /// Prompts per step.
    pub batch_size: usize,
    pub steps: usize,
    /// Gradient steps per batch; the first is on-policy.
    pub update_epochs: usize,
    /// Evaluate every this many steps; 0 disables evaluation.
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub judge_cutoff: f64,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                learning_rate: TOY_LEARNING_RATE,
                ..OptimConfig::default()
            },
            algorithm: Algorithm::Vspo,
            reward: RewardVariant::PrsShort,
            batch_size: 8,
            steps: 200,
            update_epochs: 1,
            eval_every: 5,
            eval_rollouts: 8,
            judge_cutoff: 0.6,
            env: EnvConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.optim.validate()?;
        let bad = |m: &str| Err(EnvError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.update_epochs == 0 {
            return bad("update_epochs must be >= 1");
        }
        if self.eval_every > 0 && self.eval_rollouts == 0 {
            return bad("eval_rollouts must be >= 1 when evaluating");
        }
        if self.env.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        if self.env.shape.num_keys == 0 || self.env.shape.num_words == 0 || self.env.shape.answer_len == 0 {
            return bad("task shape needs at least one key, word and answer token");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_reward: f64,
    /// Fraction of rollouts whose tool calls and answer all parse.
    pub parse_success: f64,
    pub exact_match: f64,
}

/// One JSONL metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub mean_reward: f64,
    pub valid_group_fraction: f64,
    pub dropped_count: usize,
    pub kept_count: usize,
    pub max_n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_median: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_max: Option<f64>,
    /// The sampler dropped every group and the step fell back to plain GRPO.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_parse_success: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_exact_match: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub seed: u64,
    pub history: Vec<StepMetrics>,
    pub policy: ToyPolicy,
}

impl TrainRun {
    /// `(step, value)` pairs of an evaluation metric.
    pub fn eval_curve(&self, pick: impl Fn(&StepMetrics) -> Option<f64>) -> Vec<(usize, f64)> {
        self.history.iter().filter_map(|m| pick(m).map(|v| (m.step, v))).collect()
    }

    pub fn final_eval(&self) -> Option<EvalMetrics> {
        self.history.iter().rev().find_map(|m| {
            Some(EvalMetrics {
                mean_reward: m.eval_reward?,
                parse_success: m.eval_parse_success?,
                exact_match: m.eval_exact_match?,
            })
        })
    }

    pub fn write_metrics_jsonl<W: std::io::Write>(&self, mut out: W) -> Result<(), EnvError> {
        for m in &self.history {
            serde_json::to_writer(&mut out, m)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent rng stream for `(seed, a, b)`.
pub fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(a ^ splitmix64(b))))
}

const EVAL_STREAM: u64 = u64::MAX;

/// Mean reward, parse success and exact-match rate over `rollouts` samples
/// per task. Each task draws from its own stream of `seed`.
pub fn eval_policy(
    env: &ToyEnv,
    policy: &ToyPolicy,
    tasks: &[SyntheticTask],
    rollouts: usize,
    variant: RewardVariant,
    judge: &MockJudge,
    seed: u64,
) -> Result<EvalMetrics, EnvError> {
    if tasks.is_empty() {
        return Err(EnvError::NoTasks);
    }
    let per_task: Vec<(f64, f64, f64)> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = stream_rng(seed, EVAL_STREAM, i as u64);
            let (mut reward, mut parsed, mut em) = (0.0, 0.0, 0.0);
            for _ in 0..rollouts {
                let ep = env.run_episode(policy, task, &mut rng)?;
                let b = env.score(variant, judge, task, &ep.raw)?;
                let exact = env.score(RewardVariant::Binary, judge, task, &ep.raw)?;
                reward += b.total;
                parsed += if b.process >= 1.0 { 1.0 } else { 0.0 };
                em += exact.total;
            }
            Ok((reward, parsed, em))
        })
        .collect::<Result<_, EnvError>>()?;
    let n = (tasks.len() * rollouts.max(1)) as f64;
    let (r, p, e) = per_task
        .iter()
        .fold((0.0, 0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    Ok(EvalMetrics {
        mean_reward: r / n,
        parse_success: p / n,
        exact_match: e / n,
    })
}

/// Runs `config.steps` updates from the environment's prior policy. The
/// reference policy is the frozen initial policy.
pub fn train(
    config: &TrainConfig,
    seed: u64,
    tasks: &[SyntheticTask],
    eval_tasks: &[SyntheticTask],
) -> Result<TrainRun, EnvError> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(EnvError::NoTasks);
    }
    if config.batch_size > tasks.len() {
        return Err(EnvError::Config(format!(
            "batch_size {} exceeds the {} available tasks",
            config.batch_size,
            tasks.len()
        )));
    }
    let env = ToyEnv::new(config.env.clone());
    let judge = MockJudge {
        cutoff: config.judge_cutoff,
    };
    let mut policy = env.prior_policy(&config.env.prior);
    let reference = policy.clone();
    let optim = &config.optim;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut cursor = tasks.len();
    let mut history = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        if cursor + config.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let picked = &order[cursor..cursor + config.batch_size];
        cursor += config.batch_size;

        let groups: Vec<RolloutGroup> = picked
            .par_iter()
            .map(|&i| {
                let mut group_rng = stream_rng(seed, step as u64, i as u64);
                env.rollout_group(&policy, &tasks[i], optim.group_size, config.reward, &judge, &mut group_rng)
            })
            .collect::<Result<_, _>>()?;

        let rewards: Vec<f64> = groups.iter().flat_map(RolloutGroup::rewards).collect();
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let valid = groups.iter().filter(|g| g.var >= optim.var_threshold).count();

        let plain = |groups: &[RolloutGroup]| -> Result<Batch, EnvError> {
            let mut groups = groups.to_vec();
            for g in &mut groups {
                g.compute_advantages()?;
            }
            Ok(Batch::uniform(groups)?)
        };
        let mut fallback = false;
        let mut telemetry = None;
        let batch = match config.algorithm {
            Algorithm::Grpo => plain(&groups)?,
            Algorithm::Vspo | Algorithm::VspoNoClip => {
                let smoothing = config.algorithm == Algorithm::Vspo;
                match vspo_transform(&groups, optim, smoothing, &mut rng) {
                    Ok(out) => {
                        telemetry = Some(out.telemetry);
                        out.batch
                    }
                    Err(SamplerError::AllDropped { .. }) => {
                        fallback = true;
                        plain(&groups)?
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };

        let mut first = None;
        for _ in 0..config.update_epochs {
            let out = batch_loss(&batch, &policy, &reference, optim)?;
            policy.apply_gradient(&out.grad, optim.learning_rate);
            first.get_or_insert(out);
        }
        let out = first.expect("at least one epoch");

        let eval = if config.eval_every > 0 && step % config.eval_every == 0 && !eval_tasks.is_empty() {
            Some(eval_policy(&env, &policy, eval_tasks, config.eval_rollouts, config.reward, &judge, seed)?)
        } else {
            None
        };

        history.push(StepMetrics {
            step,
            loss: out.loss,
            kl: out.metrics.kl,
            entropy: out.metrics.entropy,
            grad_norm: out.metrics.grad_norm,
            mean_reward,
            valid_group_fraction: valid as f64 / groups.len() as f64,
            dropped_count: telemetry.as_ref().map_or(groups.len() - valid, |t| t.dropped_count),
            kept_count: telemetry.as_ref().map_or(valid, |t| t.kept_count),
            max_n: telemetry.as_ref().map_or(1, |t| t.max_n),
            value_min: telemetry.as_ref().map(|t| t.value_min),
            value_median: telemetry.as_ref().map(|t| t.value_median),
            value_max: telemetry.as_ref().map(|t| t.value_max),
            fallback,
            eval_reward: eval.map(|e| e.mean_reward),
            eval_parse_success: eval.map(|e| e.parse_success),
            eval_exact_match: eval.map(|e| e.exact_match),
        });
    }

    Ok(TrainRun {
        config: config.clone(),
        seed,
        history,
        policy,
    })
}

/// First step whose trailing-5 mean is within 2% of the best trailing-5 mean
/// of the curve. Curves shorter than the window use what is available.
pub fn steps_to_plateau(curve: &[(usize, f64)]) -> Option<usize> {
    const WINDOW: usize = 5;
    const TOLERANCE: f64 = 0.02;
    if curve.is_empty() {
        return None;
    }
    let trailing: Vec<(usize, f64)> = (0..curve.len())
        .filter(|&i| i + 1 >= WINDOW.min(curve.len()))
        .map(|i| {
            let lo = (i + 1).saturating_sub(WINDOW);
            let w = &curve[lo..=i];
            (curve[i].0, w.iter().map(|p| p.1).sum::<f64>() / w.len() as f64)
        })
        .collect();
    let best = trailing.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let bar = best - TOLERANCE * best.abs();
    trailing.iter().find(|p| p.1 >= bar).map(|p| p.0)
}

/// First step at which the curve reaches `threshold`.
pub fn steps_to_threshold(curve: &[(usize, f64)], threshold: f64) -> Option<usize> {
    curve.iter().find(|p| p.1 >= threshold).map(|p| p.0)
}
