//! Synthetic groups and batches for tests.

use rand::Rng;

use crate::envsim::ToyPolicy;
use crate::grpo::{grpo_advantages, Batch, Rollout, RolloutGroup, TokenStep};
use crate::reward::RewardBreakdown;
use crate::trajectory::Trajectory;

pub fn vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

/// A group with the given rewards and no tokens.
pub fn group_with_rewards(id: &str, rewards: &[f64]) -> RolloutGroup {
    let rollouts = rewards
        .iter()
        .map(|&reward| Rollout {
            trajectory: Trajectory::default(),
            tokens: Vec::new(),
            logprobs_old: Vec::new(),
            breakdown: RewardBreakdown { total: reward, ..Default::default() },
            reward,
        })
        .collect();
    RolloutGroup::new(id, rollouts).expect("at least two rewards")
}

/// Random rollout group over a policy with `num_actions` x `num_contexts`
/// logits. Old log-probs come from a perturbed copy of the policy so ratios
/// differ from 1 and some tokens sit in the clipped region.
pub fn random_group<R: Rng>(rng: &mut R, id: &str, g: usize, policy: &ToyPolicy, old: &ToyPolicy) -> RolloutGroup {
    let rollouts = (0..g)
        .map(|_| {
            let len = rng.gen_range(1..6);
            let tokens: Vec<TokenStep> = (0..len)
                .map(|_| TokenStep {
                    context: rng.gen_range(0..policy.num_contexts()),
                    action: rng.gen_range(0..policy.num_actions()),
                })
                .collect();
            let logprobs_old = tokens.iter().map(|s| old.log_prob(s.context, s.action)).collect();
            let reward = rng.gen_range(-1.0..2.1);
            Rollout {
                trajectory: Trajectory::default(),
                tokens,
                logprobs_old,
                breakdown: RewardBreakdown { total: reward, ..Default::default() },
                reward,
            }
        })
        .collect();
    let mut group = RolloutGroup::new(id, rollouts).expect("g >= 2");
    group.advantages = grpo_advantages(&group.rewards()).expect("g >= 2");
    group
}

/// `n_groups` random groups of size `g` plus the policy they were scored under.
pub fn random_batch<R: Rng>(rng: &mut R, n_groups: usize, g: usize) -> (Batch, ToyPolicy) {
    let actions = rng.gen_range(2..6);
    let contexts = rng.gen_range(1..5);
    let policy = ToyPolicy::random(vocab(actions), contexts, 2.0, rng);
    let mut old = policy.clone();
    for p in old.params_mut() {
        *p += rng.gen_range(-0.4..0.4);
    }
    let groups = (0..n_groups)
        .map(|i| random_group(rng, &format!("p{i}"), g, &policy, &old))
        .collect();
    (Batch::uniform(groups).expect("unique ids"), policy)
}
