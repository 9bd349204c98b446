//! Reward shaping and value-based resampling for agentic RL with tool use,
//! plus a desk-scale synthetic environment to exercise them end to end.
//!
//! * [`trajectory`]: parse tagged reasoning / tool-call / answer transcripts.
//! * [`reward`]: exact match, BLEU, staged reward combinators, judges.
//! * [`grpo`]: group statistics, advantages, clipped surrogate loss.
//! * [`sampler`]: variance filtering, value scores, resampling, smoothing.
//! * [`envsim`]: synthetic lookup tasks, tabular policy, training loop.

pub mod envsim;
pub mod grpo;
pub mod reward;
pub mod sampler;
pub mod trajectory;

#[doc(hidden)]
pub mod testutil;
