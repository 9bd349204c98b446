//! Flat run configuration. Values come from built-in defaults, then an
//! optional TOML file, then `TIRLAB_<KEY>` environment variables, then
//! command-line flags; later sources win.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use tirlab::envsim::{Algorithm, EnvConfig, PriorConfig, TaskShape, TrainConfig};
use tirlab::grpo::OptimConfig;
use tirlab::reward::{HttpJudgeConfig, RewardVariant};

pub const ENV_PREFIX: &str = "TIRLAB_";

/// Keys that are absent from the defaults because they have no default value.
const OPTIONAL_KEYS: [&str; 3] = ["tasks", "eval_tasks", "judge_endpoint"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub reward: RewardVariant,
    /// Training seed for `train`.
    pub seed: u64,
    /// Training seeds for `compare`.
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_size: usize,
    pub update_epochs: usize,
    pub eval_every: usize,
    pub eval_rollouts: usize,

    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub var_threshold: f64,

    pub max_tokens: usize,
    pub max_tool_calls: usize,
    pub num_keys: usize,
    pub num_words: usize,
    pub answer_len: usize,
    pub format_bias: f64,
    pub key_bias: f64,
    pub copy_bias: f64,

    /// Seed of the generated task sets when no task files are given.
    pub task_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_tasks: Option<PathBuf>,
    pub output_dir: PathBuf,

    pub judge_cutoff: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_endpoint: Option<String>,
    pub judge_timeout_ms: u64,
    pub judge_retries: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let optim = train.optim.clone();
        let env = EnvConfig::default();
        Self {
            algorithm: train.algorithm,
            reward: train.reward,
            seed: 0,
            seeds: vec![0, 1, 2],
            steps: train.steps,
            batch_size: train.batch_size,
            update_epochs: train.update_epochs,
            eval_every: train.eval_every,
            eval_rollouts: train.eval_rollouts,
            clip_epsilon: optim.clip_epsilon,
            kl_beta: optim.kl_beta,
            group_size: optim.group_size,
            learning_rate: optim.learning_rate,
            temperature: optim.temperature,
            alpha: optim.alpha,
            var_threshold: optim.var_threshold,
            max_tokens: env.max_tokens,
            max_tool_calls: env.max_tool_calls,
            num_keys: env.shape.num_keys,
            num_words: env.shape.num_words,
            answer_len: env.shape.answer_len,
            format_bias: env.prior.format_bias,
            key_bias: env.prior.key_bias,
            copy_bias: env.prior.copy_bias,
            task_seed: 0,
            tasks: None,
            eval_tasks: None,
            output_dir: PathBuf::from("runs/latest"),
            judge_cutoff: train.judge_cutoff,
            judge_endpoint: None,
            judge_timeout_ms: 10_000,
            judge_retries: 2,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn defaults_table() -> Table {
    Table::try_from(RunConfig::default()).expect("defaults serialize")
}

/// Every key the config accepts.
pub fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = defaults_table().keys().cloned().collect();
    keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
    keys.sort();
    keys
}

/// Parses a raw override value the way it would be written in the file.
/// String-typed keys take the raw text verbatim.
fn parse_override(key: &str, raw: &str, defaults: &Table) -> Value {
    let string_typed = OPTIONAL_KEYS.contains(&key) || matches!(defaults.get(key), Some(Value::String(_)));
    if string_typed {
        return Value::String(raw.to_owned());
    }
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_owned()),
    }
}

/// Integers are accepted where the default is a float.
fn coerce(key: &str, value: Value, defaults: &Table) -> Value {
    match (defaults.get(key), value) {
        (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    }
}

/// Resolves a config from an optional file, environment lookups and
/// `key=value` overrides, in increasing precedence.
pub fn resolve(
    file: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let defaults = defaults_table();
    let keys = known_keys();
    let mut table = Table::new();

    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let parsed: Table = text
            .parse()
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        for (k, v) in parsed {
            if !keys.contains(&k) {
                return Err(ConfigError(format!("{}: unknown key `{k}`", path.display())));
            }
            let v = coerce(&k, v, &defaults);
            table.insert(k, v);
        }
    }
    for key in &keys {
        let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
        if let Some(raw) = env(&var) {
            let v = coerce(key, parse_override(key, &raw, &defaults), &defaults);
            table.insert(key.clone(), v);
        }
    }
    for (key, raw) in overrides {
        if !keys.contains(key) {
            return Err(ConfigError(format!("unknown key `{key}` in override")));
        }
        let v = coerce(key, parse_override(key, raw, &defaults), &defaults);
        table.insert(key.clone(), v);
    }

    let config: RunConfig = match Value::Table(table.clone()).try_into() {
        Ok(c) => c,
        Err(e) => return Err(blame_key(&table, &defaults).unwrap_or_else(|| ConfigError(e.to_string()))),
    };
    config.validate()?;
    Ok(config)
}

/// Finds the first key whose value alone breaks deserialization.
fn blame_key(table: &Table, defaults: &Table) -> Option<ConfigError> {
    table.iter().find_map(|(k, v)| {
        let mut probe = defaults.clone();
        probe.insert(k.clone(), v.clone());
        Value::Table(probe)
            .try_into::<RunConfig>()
            .err()
            .map(|e| ConfigError(format!("key `{k}`: {}", e.message().trim())))
    })
}

impl RunConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            clip_epsilon: self.clip_epsilon,
            kl_beta: self.kl_beta,
            group_size: self.group_size,
            learning_rate: self.learning_rate,
            temperature: self.temperature,
            alpha: self.alpha,
            var_threshold: self.var_threshold,
        }
    }

    pub fn shape(&self) -> TaskShape {
        TaskShape {
            num_keys: self.num_keys,
            num_words: self.num_words,
            answer_len: self.answer_len,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optim: self.optim(),
            algorithm: self.algorithm,
            reward: self.reward,
            batch_size: self.batch_size,
            steps: self.steps,
            update_epochs: self.update_epochs,
            eval_every: self.eval_every,
            eval_rollouts: self.eval_rollouts,
            judge_cutoff: self.judge_cutoff,
            env: EnvConfig {
                shape: self.shape(),
                max_tokens: self.max_tokens,
                max_tool_calls: self.max_tool_calls,
                prior: PriorConfig {
                    format_bias: self.format_bias,
                    key_bias: self.key_bias,
                    copy_bias: self.copy_bias,
                },
            },
        }
    }

    pub fn http_judge(&self) -> Option<HttpJudgeConfig> {
        self.judge_endpoint.as_ref().map(|endpoint| HttpJudgeConfig {
            endpoint: endpoint.clone(),
            timeout_ms: self.judge_timeout_ms,
            retries: self.judge_retries,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train_config().validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(ConfigError("seeds must not be empty".into()));
        }
        if !(self.judge_cutoff >= 0.0 && self.judge_cutoff <= 1.0) {
            return Err(ConfigError("judge_cutoff must lie in [0, 1]".into()));
        }
        if self.judge_timeout_ms == 0 {
            return Err(ConfigError("judge_timeout_ms must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let mut full = c.clone();
        full.tasks = Some("a.jsonl".into());
        full.judge_endpoint = Some("http://localhost:1/judge".into());
        let back: RunConfig = toml::from_str(&full.to_toml()).unwrap();
        assert_eq!(back, full);
        assert_ne!(full.hash(), c.hash());
    }

    #[test]
    fn file_values_and_integer_floats() {
        let f = write("algorithm = \"grpo\"\nsteps = 7\nlearning_rate = 5\nseeds = [4, 5]\n");
        let c = resolve(Some(f.path()), no_env, &[]).unwrap();
        assert_eq!(c.algorithm, Algorithm::Grpo);
        assert_eq!(c.steps, 7);
        assert_eq!(c.learning_rate, 5.0);
        assert_eq!(c.seeds, vec![4, 5]);
    }

    #[test]
    fn unknown_and_bad_keys_are_named() {
        let f = write("stepz = 3\n");
        let err = resolve(Some(f.path()), no_env, &[]).unwrap_err();
        assert!(err.0.contains("stepz"), "{err}");
        let f = write("steps = \"many\"\n");
        let err = resolve(Some(f.path()), no_env, &[]).unwrap_err();
        assert!(err.0.contains("steps") || err.0.contains("integer"), "{err}");
        let err = resolve(None, no_env, &[("nope".into(), "1".into())]).unwrap_err();
        assert!(err.0.contains("nope"));
        let err = resolve(None, no_env, &[("clip_epsilon".into(), "1.5".into())]).unwrap_err();
        assert!(err.0.contains("clip_epsilon"), "{err}");
    }

    #[test]
    fn precedence_is_flags_over_env_over_file() {
        let f = write("steps = 3\nbatch_size = 4\nreward = \"binary\"\n");
        let env: BTreeMap<&str, &str> = [("TIRLAB_STEPS", "5"), ("TIRLAB_OUTPUT_DIR", "env/out")].into();
        let lookup = |k: &str| env.get(k).map(|v| v.to_string());
        let c = resolve(Some(f.path()), lookup, &[]).unwrap();
        assert_eq!((c.steps, c.batch_size), (5, 4));
        assert_eq!(c.output_dir, PathBuf::from("env/out"));
        assert_eq!(c.reward, RewardVariant::Binary);
        let c = resolve(Some(f.path()), lookup, &[("steps".into(), "9".into())]).unwrap();
        assert_eq!(c.steps, 9);
    }
}
