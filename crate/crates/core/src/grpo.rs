//! Group-relative advantages and the clipped surrogate loss.
//!
//! For a group of `G` rollouts of one prompt, every token of rollout `i`
//! shares the advantage
//!
//! ```text
//! A_i = (R_i - mean(R)) / std(R)          (population std, zero if std == 0)
//! ```
//!
//! and the batch loss is the negated token-mean clipped surrogate plus an
//! exact KL penalty to the frozen reference policy:
//!
//! ```text
//! L = -(1/|B|) sum_g w_g (1/G) sum_i (1/|y_i|) sum_t min(r A_i, clip(r, 1-eps, 1+eps) A_i)
//!     + beta * (same weighting) KL(pi_theta(.|s_t) || pi_ref(.|s_t))
//! ```
//!
//! `w_g` is the group's copy count in the batch (see [`GroupWeighting`]).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsim::policy::{categorical_entropy, categorical_kl, ToyPolicy};
use crate::reward::RewardBreakdown;
use crate::trajectory::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("a rollout group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("group `{0}` has no advantages")]
    MissingAdvantages(String),
    #[error("prompt `{0}` appears more than once in the batch")]
    DuplicatePrompt(String),
    #[error("multiplicity for `{0}` must be at least 1")]
    BadMultiplicity(String),
    #[error("invalid optimizer config: {0}")]
    Config(String),
}

/// One sampled decision: the policy context it was drawn in and the token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStep {
    pub context: usize,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub tokens: Vec<TokenStep>,
    /// Log-probabilities of `tokens` under the sampling policy.
    pub logprobs_old: Vec<f64>,
    pub breakdown: RewardBreakdown,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub rollouts: Vec<Rollout>,
    pub mean: f64,
    pub var: f64,
    /// One per rollout once populated; empty until then.
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(prompt_id: impl Into<String>, rollouts: Vec<Rollout>) -> Result<Self, GrpoError> {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let (mean, var) = group_stats(&rewards)?;
        Ok(Self {
            prompt_id: prompt_id.into(),
            rollouts,
            mean,
            var,
            advantages: Vec::new(),
        })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    pub fn max_reward(&self) -> f64 {
        self.rollouts.iter().map(|r| r.reward).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Fills `advantages` with plain group-normalized values.
    pub fn compute_advantages(&mut self) -> Result<(), GrpoError> {
        self.advantages = grpo_advantages(&self.rewards())?;
        Ok(())
    }
}

/// How a group's copy count enters the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupWeighting {
    /// A group resampled `N` times contributes `N` identical copies.
    #[default]
    Multiplicity,
    /// Copies collapse into one contribution; the copy count is expected to
    /// have been folded into the advantages already.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub groups: Vec<RolloutGroup>,
    pub multiplicity: BTreeMap<String, usize>,
    pub weighting: GroupWeighting,
}

impl Batch {
    /// Every group once, `N = 1`.
    pub fn uniform(groups: Vec<RolloutGroup>) -> Result<Self, GrpoError> {
        let multiplicity = groups.iter().map(|g| (g.prompt_id.clone(), 1)).collect();
        Self::new(groups, multiplicity, GroupWeighting::Multiplicity)
    }

    pub fn new(
        groups: Vec<RolloutGroup>,
        multiplicity: BTreeMap<String, usize>,
        weighting: GroupWeighting,
    ) -> Result<Self, GrpoError> {
        let mut seen = std::collections::BTreeSet::new();
        for g in &groups {
            if !seen.insert(g.prompt_id.as_str()) {
                return Err(GrpoError::DuplicatePrompt(g.prompt_id.clone()));
            }
            match multiplicity.get(&g.prompt_id) {
                Some(&n) if n >= 1 => {}
                _ => return Err(GrpoError::BadMultiplicity(g.prompt_id.clone())),
            }
        }
        if let Some(extra) = multiplicity.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(GrpoError::BadMultiplicity(extra.clone()));
        }
        Ok(Self {
            groups,
            multiplicity,
            weighting,
        })
    }

    /// Effective batch size, the sum of copy counts.
    pub fn batch_size(&self) -> usize {
        self.multiplicity.values().sum()
    }

    pub fn multiplicity_of(&self, prompt_id: &str) -> usize {
        self.multiplicity.get(prompt_id).copied().unwrap_or(0)
    }

    fn loss_weight(&self, prompt_id: &str) -> f64 {
        match self.weighting {
            GroupWeighting::Multiplicity => self.multiplicity_of(prompt_id) as f64,
            GroupWeighting::Unit => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub var_threshold: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.001,
            group_size: 5,
            learning_rate: 1e-6,
            temperature: 1.0,
            alpha: 2.0,
            var_threshold: 1e-6,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.into()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.alpha >= 1.0) {
            return bad("alpha must be >= 1");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.var_threshold >= 0.0) {
            return bad("var_threshold must be >= 0");
        }
        if !(self.kl_beta >= 0.0) || !self.learning_rate.is_finite() {
            return bad("kl_beta must be >= 0 and learning_rate finite");
        }
        Ok(())
    }
}

/// Population mean and variance. Identical rewards give exactly zero variance.
pub fn group_stats(rewards: &[f64]) -> Result<(f64, f64), GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok((rewards[0], 0.0));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var))
}

pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    let (mean, var) = group_stats(rewards)?;
    if var == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_surrogate`] with respect to the log-ratio.
fn clipped_surrogate_dlogratio(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    if ratio * advantage <= clipped * advantage {
        ratio * advantage
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMetrics {
    /// Weighted per-token mean of `KL(pi_theta || pi_ref)`.
    pub kl: f64,
    /// Weighted per-token mean policy entropy.
    pub entropy: f64,
    pub grad_norm: f64,
    /// Weighted surrogate objective (the term being maximized).
    pub surrogate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `grad_surrogate + beta * grad_kl`, shaped like the policy parameters.
    pub grad: Vec<f64>,
    /// Gradient of the negated surrogate term alone.
    pub grad_surrogate: Vec<f64>,
    /// Gradient of the (unscaled) KL penalty term alone.
    pub grad_kl: Vec<f64>,
    /// The KL penalty term before multiplying by beta.
    pub kl_term: f64,
    pub metrics: LossMetrics,
}

struct GroupTerms {
    surrogate: f64,
    kl: f64,
    entropy: f64,
    weight: f64,
    grad_surrogate: Vec<f64>,
    grad_kl: Vec<f64>,
}

fn group_terms(
    group: &RolloutGroup,
    coef: f64,
    policy: &ToyPolicy,
    ref_policy: &ToyPolicy,
    clip_epsilon: f64,
) -> GroupTerms {
    let n_actions = policy.num_actions();
    let mut t = GroupTerms {
        surrogate: 0.0,
        kl: 0.0,
        entropy: 0.0,
        weight: 0.0,
        grad_surrogate: vec![0.0; policy.num_params()],
        grad_kl: vec![0.0; policy.num_params()],
    };
    for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
        if rollout.tokens.is_empty() {
            continue;
        }
        let c = coef / rollout.tokens.len() as f64;
        for (step, &old) in rollout.tokens.iter().zip(&rollout.logprobs_old) {
            let log_p = policy.log_probs(step.context);
            let log_q = ref_policy.log_probs(step.context);
            let ratio = (log_p[step.action] - old).exp();
            t.surrogate += c * clipped_surrogate(ratio, adv, clip_epsilon);
            let kl = categorical_kl(&log_p, &log_q);
            t.kl += c * kl;
            t.entropy += c * categorical_entropy(&log_p);
            t.weight += c;

            let base = step.context * n_actions;
            let d = clipped_surrogate_dlogratio(ratio, adv, clip_epsilon);
            for b in 0..n_actions {
                let p_b = log_p[b].exp();
                if d != 0.0 {
                    let onehot = if b == step.action { 1.0 } else { 0.0 };
                    t.grad_surrogate[base + b] -= c * d * (onehot - p_b);
                }
                t.grad_kl[base + b] += c * p_b * (log_p[b] - log_q[b] - kl);
            }
        }
    }
    t
}

/// Loss and exact analytic gradient for the toy policy.
///
/// `policy` is the one being optimized; the ratio denominator comes from
/// each rollout's recorded `logprobs_old`.
pub fn batch_loss(
    batch: &Batch,
    policy: &ToyPolicy,
    ref_policy: &ToyPolicy,
    cfg: &OptimConfig,
) -> Result<LossOutput, GrpoError> {
    for g in &batch.groups {
        if g.advantages.len() != g.rollouts.len() {
            return Err(GrpoError::MissingAdvantages(g.prompt_id.clone()));
        }
    }
    let batch_size = batch.batch_size().max(1) as f64;
    let terms: Vec<GroupTerms> = batch
        .groups
        .par_iter()
        .map(|g| {
            let coef = batch.loss_weight(&g.prompt_id) / (batch_size * g.rollouts.len() as f64);
            group_terms(g, coef, policy, ref_policy, cfg.clip_epsilon)
        })
        .collect();

    // fixed-order reduction
    let mut surrogate = 0.0;
    let mut kl_term = 0.0;
    let mut entropy = 0.0;
    let mut weight = 0.0;
    let mut grad_surrogate = vec![0.0; policy.num_params()];
    let mut grad_kl = vec![0.0; policy.num_params()];
    for t in &terms {
        surrogate += t.surrogate;
        kl_term += t.kl;
        entropy += t.entropy;
        weight += t.weight;
        for (acc, g) in grad_surrogate.iter_mut().zip(&t.grad_surrogate) {
            *acc += g;
        }
        for (acc, g) in grad_kl.iter_mut().zip(&t.grad_kl) {
            *acc += g;
        }
    }
    let grad: Vec<f64> = grad_surrogate
        .iter()
        .zip(&grad_kl)
        .map(|(s, k)| s + cfg.kl_beta * k)
        .collect();
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let (kl_mean, entropy_mean) = if weight > 0.0 {
        (kl_term / weight, entropy / weight)
    } else {
        (0.0, 0.0)
    };
    Ok(LossOutput {
        loss: -surrogate + cfg.kl_beta * kl_term,
        grad,
        grad_surrogate,
        grad_kl,
        kl_term,
        metrics: LossMetrics {
            kl: kl_mean,
            entropy: entropy_mean,
            grad_norm,
            surrogate,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_batch, vocab};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_stats_cases() {
        assert_eq!(group_stats(&[1.0; 5]).unwrap(), (1.0, 0.0));
        assert_eq!(group_stats(&[1.0, 0.0, 1.0, 0.0]).unwrap(), (0.5, 0.25));
        assert_eq!(group_stats(&[0.0; 5]).unwrap(), (0.0, 0.0));
        assert_eq!(group_stats(&[0.1; 3]).unwrap(), (0.1, 0.0));
        assert_eq!(group_stats(&[1.0]), Err(GrpoError::GroupTooSmall(1)));
        assert_eq!(group_stats(&[]), Err(GrpoError::GroupTooSmall(0)));
    }

    #[test]
    fn advantage_cases() {
        assert_eq!(grpo_advantages(&[1.0, 0.0, 1.0, 0.0]).unwrap(), vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(grpo_advantages(&[0.7; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(grpo_advantages(&[2.0, 0.0]).unwrap(), vec![1.0, -1.0]);
    }

    /// Both branches evaluated explicitly, then the smaller taken.
    fn surrogate_oracle(r: f64, a: f64, eps: f64) -> f64 {
        let unclipped = r * a;
        let clipped_ratio = if r < 1.0 - eps {
            1.0 - eps
        } else if r > 1.0 + eps {
            1.0 + eps
        } else {
            r
        };
        let clipped = clipped_ratio * a;
        if unclipped < clipped {
            unclipped
        } else {
            clipped
        }
    }

    #[test]
    fn surrogate_cases() {
        assert_eq!(clipped_surrogate(1.0, 0.37, 0.2), 0.37);
        assert!((clipped_surrogate(2.0, 1.0, 0.2) - 1.2).abs() < 1e-15);
        // min(0.5 * -1, 0.8 * -1) selects the clipped branch
        assert_eq!(surrogate_oracle(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        for bad in [
            OptimConfig { clip_epsilon: 1.0, ..Default::default() },
            OptimConfig { temperature: 0.0, ..Default::default() },
            OptimConfig { alpha: 0.5, ..Default::default() },
            OptimConfig { group_size: 1, ..Default::default() },
            OptimConfig { var_threshold: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn batch_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batch, _) = random_batch(&mut rng, 2, 3);
        let mut groups = batch.groups.clone();
        groups.push(groups[0].clone());
        assert!(matches!(Batch::uniform(groups), Err(GrpoError::DuplicatePrompt(_))));
        let mut m = batch.multiplicity.clone();
        m.insert("ghost".into(), 1);
        assert!(Batch::new(batch.groups.clone(), m, GroupWeighting::Multiplicity).is_err());
        let mut m = batch.multiplicity.clone();
        *m.values_mut().next().unwrap() = 0;
        assert!(Batch::new(batch.groups.clone(), m, GroupWeighting::Multiplicity).is_err());
    }

    #[test]
    fn missing_advantages_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut batch, policy) = random_batch(&mut rng, 2, 3);
        batch.groups[1].advantages.clear();
        let err = batch_loss(&batch, &policy, &policy, &OptimConfig::default()).unwrap_err();
        assert!(matches!(err, GrpoError::MissingAdvantages(_)));
    }

    #[test]
    fn zero_advantages_leave_only_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut batch, policy) = random_batch(&mut rng, 3, 4);
        for g in &mut batch.groups {
            g.advantages = vec![0.0; g.rollouts.len()];
            for r in &mut g.rollouts {
                r.logprobs_old = r.tokens.iter().map(|s| policy.log_prob(s.context, s.action)).collect();
            }
        }
        let reference = ToyPolicy::random(vocab(policy.num_actions()), policy.num_contexts(), 1.0, &mut rng);
        let cfg = OptimConfig::default();
        let out = batch_loss(&batch, &policy, &reference, &cfg).unwrap();
        assert!(out.grad_surrogate.iter().all(|&g| g == 0.0));
        assert!((out.loss - cfg.kl_beta * out.kl_term).abs() < 1e-15);
        assert!(out.kl_term > 0.0);

        let same = batch_loss(&batch, &policy, &policy, &cfg).unwrap();
        assert_eq!(same.kl_term, 0.0);
        assert!(same.grad_kl.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn parallel_reduction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (batch, policy) = random_batch(&mut rng, 6, 5);
        let cfg = OptimConfig::default();
        let a = batch_loss(&batch, &policy, &policy, &cfg).unwrap();
        for _ in 0..5 {
            let b = batch_loss(&batch, &policy, &policy, &cfg).unwrap();
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert!(a.grad.iter().zip(&b.grad).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rewards in prop::collection::vec(-10.0f64..10.0, 2..12)) {
            let adv = grpo_advantages(&rewards).unwrap();
            let (_, var) = group_stats(&rewards).unwrap();
            prop_assume!(var > 1e-12);
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-9);
        }

        #[test]
        fn surrogate_bounds(r in 1e-3f64..5.0, a in -5.0f64..5.0, eps in 0.01f64..0.99) {
            let s = clipped_surrogate(r, a, eps);
            prop_assert!(s <= r * a);
            prop_assert!(s <= r.clamp(1.0 - eps, 1.0 + eps) * a);
            prop_assert_eq!(s, surrogate_oracle(r, a, eps));
        }
    }
}
