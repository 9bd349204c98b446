//! Desk-scale tool-integrated reasoning testbed: synthetic lookup tasks, a
//! tabular softmax policy and the training loop that ties the reward,
//! advantage and sampler modules together.

pub mod env;
pub mod policy;
pub mod task;
pub mod train;

use thiserror::Error;

pub use env::{EnvConfig, PriorConfig, ToyEnv};
pub use policy::ToyPolicy;
pub use task::{generate_tasks, read_tasks_jsonl, stock_task_sets, task_sets, write_tasks_jsonl, SyntheticTask, TaskShape};
pub use train::{eval_policy, steps_to_plateau, steps_to_threshold, train, Algorithm, EvalMetrics, StepMetrics, TrainConfig, TrainRun};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("task `{0}` does not name a retrieval key in its question")]
    NoSubject(String),
    #[error("task list is empty")]
    NoTasks,
    #[error("task file line {line}: {message}")]
    TaskLine { line: usize, message: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Reward(#[from] crate::reward::RewardError),
    #[error(transparent)]
    Grpo(#[from] crate::grpo::GrpoError),
    #[error(transparent)]
    Sampler(#[from] crate::sampler::SamplerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
