use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;

/// A lookup question whose answer sits behind exactly one retrieval key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub id: String,
    pub question: String,
    pub background: String,
    pub gold_answer: String,
    /// Query key -> document returned by the search tool.
    pub retrieval_table: BTreeMap<String, String>,
}

pub fn key_token(i: usize) -> String {
    format!("k{i}")
}

pub fn word_token(i: usize) -> String {
    format!("w{i}")
}

impl SyntheticTask {
    /// Index of the key the question asks about (the first key token in it).
    pub fn subject(&self) -> Option<usize> {
        self.question.split(|c: char| !c.is_ascii_alphanumeric()).find_map(|tok| {
            tok.strip_prefix('k')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|_| self.retrieval_table.contains_key(tok))
        })
    }

    /// Keys whose documents contain the gold answer.
    pub fn supporting_keys(&self) -> Vec<&str> {
        self.retrieval_table
            .iter()
            .filter(|(_, doc)| doc.as_str() == self.gold_answer)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskShape {
    pub num_keys: usize,
    pub num_words: usize,
    pub answer_len: usize,
}

impl Default for TaskShape {
    fn default() -> Self {
        Self {
            num_keys: 6,
            num_words: 12,
            answer_len: 2,
        }
    }
}

fn random_answer<R: Rng>(rng: &mut R, shape: &TaskShape) -> Vec<usize> {
    (0..shape.answer_len).map(|_| rng.gen_range(0..shape.num_words)).collect()
}

fn render_words(words: &[usize]) -> String {
    words.iter().map(|&w| word_token(w)).collect::<Vec<_>>().join(" ")
}

/// Generates `count` tasks with ids `{prefix}-{index:03}`.
pub fn generate_tasks(seed: u64, count: usize, prefix: &str, shape: &TaskShape) -> Vec<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects: Vec<usize> = Vec::with_capacity(count);
    while subjects.len() < count {
        let mut round: Vec<usize> = (0..shape.num_keys).collect();
        round.shuffle(&mut rng);
        subjects.extend(round);
    }
    subjects.truncate(count);
    subjects
        .into_iter()
        .enumerate()
        .map(|(i, subject)| {
            let gold = random_answer(&mut rng, shape);
            let retrieval_table = (0..shape.num_keys)
                .map(|k| {
                    let doc = if k == subject {
                        gold.clone()
                    } else {
                        loop {
                            let d = random_answer(&mut rng, shape);
                            if d != gold {
                                break d;
                            }
                        }
                    };
                    (key_token(k), render_words(&doc))
                })
                .collect();
            SyntheticTask {
                id: format!("{prefix}-{i:03}"),
                question: format!("Which code is filed under {}?", key_token(subject)),
                background: "The registry maps each key to a code; search it by key.".into(),
                gold_answer: render_words(&gold),
                retrieval_table,
            }
        })
        .collect()
}

pub const STOCK_TRAIN_TASKS: usize = 50;
pub const STOCK_EVAL_TASKS: usize = 20;

/// The stock train/eval split: 50 training and 20 held-out tasks.
pub fn stock_task_sets(seed: u64) -> (Vec<SyntheticTask>, Vec<SyntheticTask>) {
    task_sets(seed, &TaskShape::default())
}

/// Stock-sized train/eval split for an arbitrary task shape.
pub fn task_sets(seed: u64, shape: &TaskShape) -> (Vec<SyntheticTask>, Vec<SyntheticTask>) {
    let train = generate_tasks(seed, STOCK_TRAIN_TASKS, "train", shape);
    let eval = generate_tasks(seed.wrapping_add(0x9e37_79b9), STOCK_EVAL_TASKS, "eval", shape);
    (train, eval)
}

pub fn write_tasks_jsonl<W: Write>(tasks: &[SyntheticTask], mut out: W) -> Result<(), EnvError> {
    for t in tasks {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tasks_jsonl<R: BufRead>(input: R) -> Result<Vec<SyntheticTask>, EnvError> {
    let mut tasks = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: SyntheticTask = serde_json::from_str(&line).map_err(|e| EnvError::TaskLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        tasks.push(task);
    }
    Ok(tasks)
}
