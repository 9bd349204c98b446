//! Token-level rollout of the toy policy against the lookup environment.
//!
//! The policy emits one vocabulary token at a time. Closing a well-formed
//! tool call runs the search tool and splices the result into the transcript
//! as an observation block. The episode ends when an open answer is closed,
//! the stop token is emitted, or a budget runs out.
//!
//! The policy context is a finite abstraction of the history:
//!
//! * right after `<tool_call>`: the question's subject (which key to search);
//! * inside an answer: the word at the same position of the latest
//!   observation, if any (what to copy);
//! * otherwise: the last token (or start / observation marker) and how many
//!   tool calls have run so far, capped at 2.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::ToyPolicy;
use super::task::{key_token, word_token, SyntheticTask, TaskShape};
use super::EnvError;
use crate::grpo::{Rollout, RolloutGroup, TokenStep};
use crate::reward::{binary_reward, prs_long, prs_short, MockJudge, RewardBreakdown, RewardVariant};
use crate::trajectory::{extract_answer, parse_trajectory, TagScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    OpenReasoning,
    CloseReasoning,
    OpenToolCall,
    CloseToolCall,
    OpenAnswer,
    CloseAnswer,
    Think,
    Stop,
    Key(usize),
    Word(usize),
}

const FIXED_TOKENS: [Token; 8] = [
    Token::OpenReasoning,
    Token::CloseReasoning,
    Token::OpenToolCall,
    Token::CloseToolCall,
    Token::OpenAnswer,
    Token::CloseAnswer,
    Token::Think,
    Token::Stop,
];

impl Token {
    fn is_content(self) -> bool {
        matches!(self, Token::Think | Token::Key(_) | Token::Word(_))
    }
}

/// Budgets and the warm-start prior of the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub shape: TaskShape,
    pub max_tokens: usize,
    pub max_tool_calls: usize,
    pub prior: PriorConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            shape: TaskShape::default(),
            max_tokens: 24,
            max_tool_calls: 3,
            prior: PriorConfig::default(),
        }
    }
}

/// Logit offsets of the initial policy. `format_bias` favours the canonical
/// next tag, `key_bias` the key named in the question, `copy_bias` copying
/// the observed word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub format_bias: f64,
    pub key_bias: f64,
    pub copy_bias: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            format_bias: 6.0,
            key_bias: 1.0,
            copy_bias: 2.0,
        }
    }
}

/// Decision context, see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    General { last: Option<Last>, calls: usize },
    KeySelect { subject: usize },
    Answer { cue: Option<usize> },
}

/// What preceded the current decision in a general context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Last {
    Token(usize),
    Observation,
}

const CALL_BUCKETS: usize = 3;

/// Vocabulary and context indexing for one task shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEnv {
    pub config: EnvConfig,
    tokens: Vec<Token>,
    scheme: TagScheme,
}

impl ToyEnv {
    pub fn new(config: EnvConfig) -> Self {
        let mut tokens = FIXED_TOKENS.to_vec();
        tokens.extend((0..config.shape.num_keys).map(Token::Key));
        tokens.extend((0..config.shape.num_words).map(Token::Word));
        Self {
            config,
            tokens,
            scheme: TagScheme::default(),
        }
    }

    pub fn scheme(&self) -> &TagScheme {
        &self.scheme
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_index(&self, token: Token) -> usize {
        self.tokens.iter().position(|&t| t == token).expect("token in vocabulary")
    }

    pub fn token_text(&self, token: Token) -> String {
        match token {
            Token::OpenReasoning => "<reasoning>".into(),
            Token::CloseReasoning => "</reasoning>".into(),
            Token::OpenToolCall => "<tool_call>".into(),
            Token::CloseToolCall => "</tool_call>".into(),
            Token::OpenAnswer => "<answer>".into(),
            Token::CloseAnswer => "</answer>".into(),
            Token::Think => "think".into(),
            Token::Stop => "<eos>".into(),
            Token::Key(k) => key_token(k),
            Token::Word(w) => word_token(w),
        }
    }

    pub fn vocabulary(&self) -> Vec<String> {
        self.tokens.iter().map(|&t| self.token_text(t)).collect()
    }

    fn general_slots(&self) -> usize {
        // last token, start, observation
        self.vocab_size() + 2
    }

    pub fn num_contexts(&self) -> usize {
        self.general_slots() * CALL_BUCKETS + self.config.shape.num_keys + self.config.shape.num_words + 1
    }

    pub fn context_index(&self, ctx: Context) -> usize {
        let general = self.general_slots() * CALL_BUCKETS;
        match ctx {
            Context::General { last, calls } => {
                let slot = match last {
                    None => 0,
                    Some(Last::Observation) => 1,
                    Some(Last::Token(t)) => 2 + t,
                };
                slot * CALL_BUCKETS + calls.min(CALL_BUCKETS - 1)
            }
            Context::KeySelect { subject } => general + subject,
            Context::Answer { cue } => {
                general + self.config.shape.num_keys + cue.map_or(self.config.shape.num_words, |w| w)
            }
        }
    }

    /// Uniform policy over the vocabulary in every context.
    pub fn uniform_policy(&self) -> ToyPolicy {
        ToyPolicy::uniform(self.vocabulary(), self.num_contexts())
    }

    /// Warm-start policy: uniform logits plus the configured prior offsets.
    pub fn prior_policy(&self, prior: &PriorConfig) -> ToyPolicy {
        let mut policy = self.uniform_policy();
        let ti = |t: Token| self.token_index(t);
        let shape = self.config.shape;
        for calls in 0..CALL_BUCKETS {
            let canonical: [(Option<Last>, &[Token]); 6] = [
                (None, &[Token::OpenReasoning]),
                (Some(Last::Token(ti(Token::OpenReasoning))), &[Token::Think]),
                (Some(Last::Token(ti(Token::Think))), &[Token::CloseReasoning]),
                (
                    Some(Last::Token(ti(Token::CloseReasoning))),
                    &[Token::OpenToolCall, Token::OpenAnswer],
                ),
                (Some(Last::Token(ti(Token::CloseToolCall))), &[Token::OpenReasoning]),
                (Some(Last::Observation), &[Token::OpenReasoning]),
            ];
            for (last, next) in canonical {
                let row = policy.row_mut(self.context_index(Context::General { last, calls }));
                for &t in next {
                    row[ti(t)] += prior.format_bias;
                }
            }
            for k in 0..shape.num_keys {
                let row = policy.row_mut(self.context_index(Context::General {
                    last: Some(Last::Token(ti(Token::Key(k)))),
                    calls,
                }));
                row[ti(Token::CloseToolCall)] += prior.format_bias;
            }
        }
        for subject in 0..shape.num_keys {
            let row = policy.row_mut(self.context_index(Context::KeySelect { subject }));
            for k in 0..shape.num_keys {
                row[ti(Token::Key(k))] += prior.format_bias;
            }
            row[ti(Token::Key(subject))] += prior.key_bias;
        }
        for cue in (0..shape.num_words).map(Some).chain([None]) {
            let row = policy.row_mut(self.context_index(Context::Answer { cue }));
            match cue {
                Some(w) => {
                    for v in 0..shape.num_words {
                        row[ti(Token::Word(v))] += prior.format_bias;
                    }
                    row[ti(Token::Word(w))] += prior.copy_bias;
                }
                None => row[ti(Token::CloseAnswer)] += prior.format_bias,
            }
        }
        policy
    }

    /// Policy that puts all but `exp(-margin)`-order mass on one canonical
    /// trajectory: reason, look up the subject, reason, copy the document.
    pub fn expert_policy(&self, margin: f64) -> ToyPolicy {
        let mut policy = self.uniform_policy();
        let ti = |t: Token| self.token_index(t);
        let shape = self.config.shape;
        let mut set = |ctx: Context, t: Token| policy.row_mut(self.context_index(ctx))[ti(t)] = margin;
        for calls in 0..CALL_BUCKETS {
            let general = |last: Option<Last>| Context::General { last, calls };
            set(general(None), Token::OpenReasoning);
            set(general(Some(Last::Token(ti(Token::OpenReasoning)))), Token::Think);
            set(general(Some(Last::Token(ti(Token::Think)))), Token::CloseReasoning);
            let after_reasoning = if calls == 0 { Token::OpenToolCall } else { Token::OpenAnswer };
            set(general(Some(Last::Token(ti(Token::CloseReasoning)))), after_reasoning);
            set(general(Some(Last::Observation)), Token::OpenReasoning);
            for k in 0..shape.num_keys {
                set(general(Some(Last::Token(ti(Token::Key(k))))), Token::CloseToolCall);
            }
        }
        for subject in 0..shape.num_keys {
            set(Context::KeySelect { subject }, Token::Key(subject));
        }
        for w in 0..shape.num_words {
            set(Context::Answer { cue: Some(w) }, Token::Word(w));
        }
        set(Context::Answer { cue: None }, Token::CloseAnswer);
        policy
    }

    /// Samples one episode. Returns the transcript, the sampled decisions and
    /// their log-probabilities under `policy`.
    pub fn run_episode<R: Rng + ?Sized>(
        &self,
        policy: &ToyPolicy,
        task: &SyntheticTask,
        rng: &mut R,
    ) -> Result<Episode, EnvError> {
        let subject = task.subject().ok_or_else(|| EnvError::NoSubject(task.id.clone()))?;
        let mut ep = EpisodeState::default();
        let mut out = Episode::default();
        while out.tokens.len() < self.config.max_tokens {
            let ctx = ep.context(subject);
            let context = self.context_index(ctx);
            let log_probs = policy.log_probs(context);
            let dist = WeightedIndex::new(log_probs.iter().map(|lp| lp.exp())).expect("valid distribution");
            let action = dist.sample(rng);
            out.tokens.push(TokenStep { context, action });
            out.logprobs.push(log_probs[action]);
            match self.apply(&mut ep, task, self.tokens[action]) {
                Flow::Continue => {}
                Flow::Done => return Ok(out.finish(ep, false)),
                Flow::Truncated => return Ok(out.finish(ep, true)),
            }
        }
        Ok(out.finish(ep, true))
    }

    fn apply(&self, ep: &mut EpisodeState, task: &SyntheticTask, token: Token) -> Flow {
        let text = self.token_text(token);
        if token.is_content() {
            if ep.prev_content {
                ep.raw.push(' ');
            }
            ep.prev_content = true;
        } else {
            ep.prev_content = false;
        }
        ep.raw.push_str(&text);
        ep.last = Some(Last::Token(self.token_index(token)));

        if let Some(payload) = ep.tool_payload.as_mut() {
            match token {
                Token::CloseToolCall => {}
                t if t.is_content() => payload.push(text.clone()),
                _ => ep.tool_payload_broken = true,
            }
        }
        if let Some(pos) = ep.answer_pos.as_mut() {
            if token != Token::CloseAnswer {
                *pos += 1;
                if !matches!(token, Token::Word(_)) {
                    ep.answer_streaming = false;
                }
            }
        }

        match token {
            Token::OpenToolCall => {
                ep.tool_payload = Some(Vec::new());
                ep.tool_payload_broken = false;
            }
            Token::CloseToolCall => {
                if let Some(payload) = ep.tool_payload.take() {
                    if !payload.is_empty() && !ep.tool_payload_broken {
                        if ep.calls >= self.config.max_tool_calls {
                            return Flow::Truncated;
                        }
                        ep.calls += 1;
                        let query = payload.join(" ");
                        let doc = task
                            .retrieval_table
                            .get(&query)
                            .cloned()
                            .unwrap_or_else(|| "no result".to_owned());
                        ep.cue_words = doc
                            .split_whitespace()
                            .map(|w| {
                                w.strip_prefix('w')
                                    .and_then(|n| n.parse::<usize>().ok())
                                    .filter(|&n| n < self.config.shape.num_words)
                            })
                            .collect();
                        ep.raw.push_str(&format!("<observation>{doc}</observation>"));
                        ep.last = Some(Last::Observation);
                    }
                }
            }
            Token::OpenAnswer => {
                ep.answer_pos = Some(0);
                ep.answer_streaming = true;
            }
            Token::CloseAnswer if ep.answer_pos.is_some() => return Flow::Done,
            Token::Stop => return Flow::Done,
            _ => {}
        }
        Flow::Continue
    }

    pub fn score(
        &self,
        variant: RewardVariant,
        judge: &MockJudge,
        task: &SyntheticTask,
        raw: &str,
    ) -> Result<RewardBreakdown, EnvError> {
        let (traj, report) = parse_trajectory(raw, &self.scheme);
        let pred = extract_answer(&traj);
        Ok(match variant {
            RewardVariant::Binary => binary_reward(&report, pred.as_deref(), &task.gold_answer),
            RewardVariant::PrsShort => prs_short(&report, pred.as_deref().unwrap_or(""), &task.gold_answer),
            RewardVariant::PrsLong => prs_long(
                &report,
                &task.question,
                pred.as_deref().unwrap_or(""),
                &task.gold_answer,
                judge,
            )?,
        })
    }

    /// Samples `g` rollouts of one task and scores them.
    pub fn rollout_group<R: Rng + ?Sized>(
        &self,
        policy: &ToyPolicy,
        task: &SyntheticTask,
        g: usize,
        variant: RewardVariant,
        judge: &MockJudge,
        rng: &mut R,
    ) -> Result<RolloutGroup, EnvError> {
        let mut rollouts = Vec::with_capacity(g);
        for _ in 0..g {
            let ep = self.run_episode(policy, task, rng)?;
            let breakdown = self.score(variant, judge, task, &ep.raw)?;
            let (trajectory, _) = parse_trajectory(&ep.raw, &self.scheme);
            rollouts.push(Rollout {
                trajectory,
                tokens: ep.tokens,
                logprobs_old: ep.logprobs,
                reward: breakdown.total,
                breakdown,
            });
        }
        Ok(RolloutGroup::new(task.id.clone(), rollouts)?)
    }
}

enum Flow {
    Continue,
    Done,
    Truncated,
}

#[derive(Default)]
struct EpisodeState {
    raw: String,
    last: Option<Last>,
    prev_content: bool,
    calls: usize,
    tool_payload: Option<Vec<String>>,
    tool_payload_broken: bool,
    answer_pos: Option<usize>,
    answer_streaming: bool,
    cue_words: Vec<Option<usize>>,
}

impl EpisodeState {
    fn context(&self, subject: usize) -> Context {
        if self.tool_payload.as_ref().is_some_and(Vec::is_empty) && !self.tool_payload_broken {
            return Context::KeySelect { subject };
        }
        if let (Some(pos), true) = (self.answer_pos, self.answer_streaming) {
            return Context::Answer {
                cue: self.cue_words.get(pos).copied().flatten(),
            };
        }
        Context::General {
            last: self.last,
            calls: self.calls,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Episode {
    pub raw: String,
    pub tokens: Vec<TokenStep>,
    pub logprobs: Vec<f64>,
    pub truncated: bool,
}

impl Episode {
    fn finish(mut self, state: EpisodeState, truncated: bool) -> Self {
        self.raw = state.raw;
        self.truncated = truncated;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::task::generate_tasks;
    use crate::reward::FORMAT_BONUS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn setup() -> (ToyEnv, Vec<SyntheticTask>) {
        let env = ToyEnv::new(EnvConfig::default());
        let tasks = generate_tasks(11, 6, "t", &env.config.shape);
        (env, tasks)
    }

    #[test]
    fn vocabulary_and_contexts() {
        let (env, _) = setup();
        assert_eq!(env.vocab_size(), 8 + 6 + 12);
        assert_eq!(env.uniform_policy().num_contexts(), env.num_contexts());
        let mut seen = std::collections::BTreeSet::new();
        for calls in 0..CALL_BUCKETS {
            for last in [None, Some(Last::Observation)]
                .into_iter()
                .chain((0..env.vocab_size()).map(|t| Some(Last::Token(t))))
            {
                seen.insert(env.context_index(Context::General { last, calls }));
            }
        }
        for subject in 0..6 {
            seen.insert(env.context_index(Context::KeySelect { subject }));
        }
        for cue in (0..12).map(Some).chain([None]) {
            seen.insert(env.context_index(Context::Answer { cue }));
        }
        assert_eq!(seen.len(), env.num_contexts());
        assert_eq!(*seen.iter().next_back().unwrap(), env.num_contexts() - 1);
    }

    #[test]
    fn group_has_requested_size() {
        let (env, tasks) = setup();
        let policy = env.prior_policy(&PriorConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let group = env
            .rollout_group(&policy, &tasks[0], 5, RewardVariant::PrsShort, &MockJudge::default(), &mut rng)
            .unwrap();
        assert_eq!(group.rollouts.len(), 5);
        assert_eq!(group.prompt_id, tasks[0].id);
    }

    #[test]
    fn expert_policy_is_perfect_and_degenerate() {
        let (env, tasks) = setup();
        let policy = env.expert_policy(60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for task in &tasks {
            let group = env
                .rollout_group(&policy, task, 5, RewardVariant::PrsShort, &MockJudge::default(), &mut rng)
                .unwrap();
            assert_eq!(group.var, 0.0);
            for r in &group.rollouts {
                assert!((r.reward - 2.1).abs() < 1e-12, "{}", r.trajectory.raw);
                assert_eq!(r.trajectory.steps.len(), 1);
                assert_eq!(r.trajectory.steps[0].observation, task.gold_answer);
            }
        }
    }

    #[test]
    fn unknown_key_returns_no_result() {
        let (env, tasks) = setup();
        let task = &tasks[0];
        let mut ep = EpisodeState::default();
        for t in [Token::OpenToolCall, Token::Word(0), Token::CloseToolCall] {
            assert!(matches!(env.apply(&mut ep, task, t), Flow::Continue));
        }
        assert!(ep.raw.ends_with("<observation>no result</observation>"), "{}", ep.raw);
        assert_eq!(ep.calls, 1);
    }

    #[test]
    fn tool_budget_truncates() {
        let (env, tasks) = setup();
        let task = &tasks[0];
        let mut ep = EpisodeState::default();
        for _ in 0..env.config.max_tool_calls {
            for t in [Token::OpenToolCall, Token::Key(0), Token::CloseToolCall] {
                assert!(matches!(env.apply(&mut ep, task, t), Flow::Continue));
            }
        }
        env.apply(&mut ep, task, Token::OpenToolCall);
        env.apply(&mut ep, task, Token::Key(0));
        assert!(matches!(env.apply(&mut ep, task, Token::CloseToolCall), Flow::Truncated));
    }

    #[test]
    fn recorded_logprobs_match_policy_and_rewards_recompute() {
        let (env, tasks) = setup();
        let policy = env.prior_policy(&PriorConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for task in &tasks {
            let group = env
                .rollout_group(&policy, task, 5, RewardVariant::PrsShort, &MockJudge::default(), &mut rng)
                .unwrap();
            for r in &group.rollouts {
                assert_eq!(r.tokens.len(), r.logprobs_old.len());
                for (s, &lp) in r.tokens.iter().zip(&r.logprobs_old) {
                    assert_eq!((policy.log_prob(s.context, s.action) - lp).exp(), 1.0);
                }
                let again = env
                    .score(RewardVariant::PrsShort, &MockJudge::default(), task, &r.trajectory.raw)
                    .unwrap();
                assert_eq!(again, r.breakdown);
                assert_eq!(again.total, r.reward);
            }
        }
    }

    /// Independent renderer for a token sequence without tool execution.
    fn render(env: &ToyEnv, tokens: &[Token]) -> String {
        let mut out = String::new();
        let mut prev_content = false;
        for &t in tokens {
            let content = matches!(t, Token::Think | Token::Key(_) | Token::Word(_));
            if content && prev_content {
                out.push(' ');
            }
            prev_content = content;
            out.push_str(&env.token_text(t));
        }
        out
    }

    #[test]
    fn uniform_policy_reward_distribution_matches_enumeration() {
        let env = ToyEnv::new(EnvConfig {
            max_tokens: 2,
            ..EnvConfig::default()
        });
        let task = &generate_tasks(5, 1, "t", &env.config.shape)[0];
        let judge = MockJudge::default();
        let v = env.vocab_size() as f64;
        let key = |r: f64| (r * 1e6).round() as i64;

        let mut exact: BTreeMap<i64, f64> = BTreeMap::new();
        for &a in env.tokens() {
            let ends = matches!(a, Token::Stop);
            if ends {
                let r = env.score(RewardVariant::PrsShort, &judge, task, &render(&env, &[a])).unwrap();
                *exact.entry(key(r.total)).or_default() += 1.0 / v;
                continue;
            }
            for &b in env.tokens() {
                let r = env.score(RewardVariant::PrsShort, &judge, task, &render(&env, &[a, b])).unwrap();
                *exact.entry(key(r.total)).or_default() += 1.0 / (v * v);
            }
        }
        assert!(exact.contains_key(&key(-1.0)), "malformed outcomes exist");

        let policy = env.uniform_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let mut counts: BTreeMap<i64, f64> = BTreeMap::new();
        for _ in 0..n {
            let ep = env.run_episode(&policy, task, &mut rng).unwrap();
            let r = env.score(RewardVariant::PrsShort, &judge, task, &ep.raw).unwrap();
            *counts.entry(key(r.total)).or_default() += 1.0;
        }
        for k in counts.keys() {
            assert!(exact.contains_key(k), "sampled reward {k} has zero exact probability");
        }
        for (k, &p) in &exact {
            let freq = counts.get(k).copied().unwrap_or(0.0) / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= 4.0 * se + 1e-12, "reward {k}: freq {freq} vs p {p}");
        }
    }

    #[test]
    fn uniform_rollouts_include_malformed_ones() {
        let (env, tasks) = setup();
        let policy = env.uniform_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let group = env
            .rollout_group(&policy, &tasks[0], 5, RewardVariant::PrsShort, &MockJudge::default(), &mut rng)
            .unwrap();
        assert!(group
            .rollouts
            .iter()
            .any(|r| r.breakdown.process == -1.0 && r.reward <= -1.0 + FORMAT_BONUS));
    }
}
