//! Value-based batch resampling.
//!
//! Groups whose rewards barely vary carry no gradient under group-normalized
//! advantages. The sampler drops them, scores the surviving prompts by
//!
//! ```text
//! V_x = (R_max - mean_x) * var_x
//! ```
//!
//! (`R_max` over the whole pre-filter batch), and refills the freed slots by
//! drawing survivors with replacement from `softmax(V / T)`. No new rollouts
//! are generated; a prompt drawn `k` times ends up with `N = 1 + k` copies.
//!
//! With smoothing enabled, the `N` copies of a prompt collapse into a single
//! contribution whose advantages are scaled by `alpha - (alpha - 1) / N`,
//! bounding a repeated prompt's weight by `alpha` instead of `N`.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{grpo_advantages, Batch, GroupWeighting, GrpoError, OptimConfig, RolloutGroup};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("all {dropped} groups fell below the variance threshold")]
    AllDropped { dropped: usize },
    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("value scores must be non-empty and finite")]
    InvalidValues,
    #[error("copy count must be >= 1, got {0}")]
    InvalidMultiplicity(usize),
    #[error("probabilities ({probs}) do not align with kept groups ({kept})")]
    Misaligned { probs: usize, kept: usize },
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueScore {
    pub prompt_id: String,
    pub value: f64,
    pub probability: f64,
}

/// Splits groups by reward variance: `var >= eps` is kept.
pub fn filter_low_variance(
    groups: &[RolloutGroup],
    eps: f64,
) -> Result<(Vec<RolloutGroup>, Vec<RolloutGroup>), SamplerError> {
    if groups.is_empty() {
        return Err(SamplerError::EmptyBatch);
    }
    let (kept, dropped): (Vec<_>, Vec<_>) = groups.iter().cloned().partition(|g| g.var >= eps);
    if kept.is_empty() {
        return Err(SamplerError::AllDropped { dropped: dropped.len() });
    }
    Ok((kept, dropped))
}

pub fn value_score(group: &RolloutGroup, r_max: f64) -> f64 {
    (r_max - group.mean) * group.var
}

/// `softmax(values / T)` with max subtraction.
pub fn sampling_distribution(values: &[f64], temperature: f64) -> Result<Vec<f64>, SamplerError> {
    if !(temperature > 0.0) {
        return Err(SamplerError::InvalidTemperature(temperature));
    }
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(SamplerError::InvalidValues);
    }
    let scaled: Vec<f64> = values.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Draws `slots` prompts with replacement. Every kept prompt keeps its own
/// slot, so `N = 1 + times drawn`.
pub fn resample<R: Rng + ?Sized>(
    kept: &[RolloutGroup],
    slots: usize,
    probs: &[f64],
    rng: &mut R,
) -> Result<BTreeMap<String, usize>, SamplerError> {
    if probs.len() != kept.len() {
        return Err(SamplerError::Misaligned {
            probs: probs.len(),
            kept: kept.len(),
        });
    }
    let mut counts = vec![1usize; kept.len()];
    if slots > 0 {
        let dist = WeightedIndex::new(probs).map_err(|_| SamplerError::InvalidValues)?;
        for _ in 0..slots {
            counts[dist.sample(rng)] += 1;
        }
    }
    Ok(kept
        .iter()
        .zip(counts)
        .map(|(g, n)| (g.prompt_id.clone(), n))
        .collect())
}

/// `(alpha - (alpha - 1) / n) * a`.
pub fn smooth_clip_advantage(a: f64, n: usize, alpha: f64) -> Result<f64, SamplerError> {
    if n < 1 {
        return Err(SamplerError::InvalidMultiplicity(n));
    }
    Ok(smoothing_factor(n, alpha) * a)
}

pub fn smoothing_factor(n: usize, alpha: f64) -> f64 {
    alpha - (alpha - 1.0) / n as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerTelemetry {
    pub dropped_count: usize,
    pub kept_count: usize,
    pub max_n: usize,
    pub value_min: f64,
    pub value_median: f64,
    pub value_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VspoOutput {
    pub batch: Batch,
    pub scores: Vec<ValueScore>,
    pub telemetry: SamplerTelemetry,
}

/// Filter, score, resample and (optionally) smooth-clip one batch.
pub fn vspo_transform<R: Rng + ?Sized>(
    groups: &[RolloutGroup],
    cfg: &OptimConfig,
    smoothing: bool,
    rng: &mut R,
) -> Result<VspoOutput, SamplerError> {
    let r_max = groups
        .iter()
        .map(RolloutGroup::max_reward)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut kept, dropped) = filter_low_variance(groups, cfg.var_threshold)?;
    let values: Vec<f64> = kept.iter().map(|g| value_score(g, r_max)).collect();
    let probs = sampling_distribution(&values, cfg.temperature)?;
    let multiplicity = resample(&kept, dropped.len(), &probs, rng)?;

    for g in &mut kept {
        let n = multiplicity[&g.prompt_id];
        let adv = grpo_advantages(&g.rewards())?;
        g.advantages = if smoothing {
            let w = smoothing_factor(n, cfg.alpha);
            adv.into_iter().map(|a| w * a).collect()
        } else {
            adv
        };
    }

    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    let telemetry = SamplerTelemetry {
        dropped_count: dropped.len(),
        kept_count: kept.len(),
        max_n: multiplicity.values().copied().max().unwrap_or(0),
        value_min: sorted[0],
        value_median: median,
        value_max: sorted[sorted.len() - 1],
    };
    let scores = kept
        .iter()
        .zip(values.iter().zip(&probs))
        .map(|(g, (&value, &probability))| ValueScore {
            prompt_id: g.prompt_id.clone(),
            value,
            probability,
        })
        .collect();
    let weighting = if smoothing {
        GroupWeighting::Unit
    } else {
        GroupWeighting::Multiplicity
    };
    let batch = Batch::new(kept, multiplicity, weighting)?;
    Ok(VspoOutput {
        batch,
        scores,
        telemetry,
    })
}
