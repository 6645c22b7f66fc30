//! Target models: the systems whose accuracy the search is calibrating.
//!
//! Three backends share one scoring path. Every backend produces a raw text
//! response per problem and the environment's own checker decides
//! correctness; synthetic items are the exception, since they carry no
//! content and are scored by a Bernoulli draw.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::arith::{self, ArithOperator, ArithProblem, Num, Search};
use crate::env::spatial::{self, AnswerValue, Orientation, SpatialProblem};
use crate::env::{Dataset, EnvKind, Environment, Problem};
use crate::gateway::{ChatBackend, ChatRequest, GatewayError, Message};
use crate::paramspace::{self, ParamConfig, ParameterSpec};
use crate::seed::{self, Seed};

pub const DEFAULT_WORKERS: usize = 8;
/// Exchanges allowed in the arithmetic tool loop.
pub const ARITH_HORIZON: usize = 16;
/// Distinct intermediate values the arithmetic oracle may visit.
pub const ORACLE_NODE_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("target misconfigured: {0}")]
    Config(String),
    #[error("item {index}: {source}")]
    Backend {
        index: usize,
        #[source]
        source: GatewayError,
    },
    #[error("item {index}: oracle found no solution within its search budget")]
    NoSolutionFound { index: usize },
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmTarget {
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_budget")]
    pub max_output_tokens: u32,
    #[serde(default = "default_budget")]
    pub max_reasoning_tokens: u32,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_budget() -> u32 {
    1024
}

fn default_horizon() -> usize {
    ARITH_HORIZON
}

fn default_workers() -> usize {
    DEFAULT_WORKERS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum Backend {
    Llm(LlmTarget),
    /// Exact solver whose answers are corrupted with probability `epsilon`.
    OracleNoisy { epsilon: f64 },
    /// `P(correct) = σ(offset − slope · (weights · features))`.
    SyntheticLogistic { weights: Vec<f64>, slope: f64, offset: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    #[serde(flatten)]
    pub backend: Backend,
    #[serde(default)]
    pub seed: Seed,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl TargetSpec {
    pub fn new(backend: Backend) -> Self {
        TargetSpec {
            backend,
            seed: 0,
            workers: DEFAULT_WORKERS,
        }
    }

    pub fn oracle(epsilon: f64) -> Self {
        Self::new(Backend::OracleNoisy { epsilon })
    }

    pub fn logistic(weights: Vec<f64>, slope: f64, offset: f64) -> Self {
        Self::new(Backend::SyntheticLogistic { weights, slope, offset })
    }

    pub fn name(&self) -> &'static str {
        match self.backend {
            Backend::Llm(_) => "llm",
            Backend::OracleNoisy { .. } => "oracle-noisy",
            Backend::SyntheticLogistic { .. } => "synthetic-logistic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: usize,
    pub correct: bool,
    pub raw: String,
    /// Model exchanges used (LLM backend only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turns: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub rho_hat: f64,
    pub n: usize,
    pub per_item: Vec<ItemResult>,
}

impl RolloutResult {
    pub fn from_items(per_item: Vec<ItemResult>) -> Self {
        let n = per_item.len();
        let correct = per_item.iter().filter(|r| r.correct).count();
        RolloutResult {
            rho_hat: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            n,
            per_item,
        }
    }
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `σ(b − a · (w · f))`.
pub fn synthetic_success_prob(weights: &[f64], slope: f64, offset: f64, features: &[f64]) -> f64 {
    let score: f64 = weights.iter().zip(features).map(|(w, f)| w * f).sum();
    logistic(offset - slope * score)
}

/// Shortest operator sequence reaching `y` (lexicographically first among
/// equals), searched no deeper than the ground truth.
pub fn arith_oracle(problem: &ArithProblem) -> Option<Vec<ArithOperator>> {
    let depth = problem.ground_truth.len().clamp(1, arith::MAX_ANSWER_LEN);
    match arith::shortest_solution(problem, &ArithOperator::ALL, depth, ORACLE_NODE_CAP) {
        Search::Found(seq) => Some(seq),
        // the ground truth always exists; report it rather than nothing
        Search::Exhausted => Some(problem.ground_truth.clone()),
        Search::CapReached => None,
    }
}

fn corrupt_arith(problem: &ArithProblem, rng: &mut impl Rng) -> Vec<ArithOperator> {
    for _ in 0..20 {
        let len = rng.random_range(1..=problem.ground_truth.len().max(1));
        let seq: Vec<ArithOperator> = (0..len)
            .map(|_| ArithOperator::ALL[rng.random_range(0..ArithOperator::ALL.len())])
            .collect();
        if !arith::verify(problem, &seq) {
            return seq;
        }
    }
    // longer than any accepted answer
    vec![ArithOperator::Add; arith::MAX_ANSWER_LEN + 1]
}

fn corrupt_spatial(problem: &SpatialProblem) -> spatial::Answer {
    let mut answer = problem.ground_truth.clone();
    if let Some((_, v)) = answer.first_mut() {
        *v = match v {
            AnswerValue::Real(x) => AnswerValue::Real(*x + 1.0),
            AnswerValue::Int(i) => AnswerValue::Int(*i + 1),
            AnswerValue::Label(l) => {
                let o = Orientation::parse(l).unwrap_or(Orientation::North);
                AnswerValue::Label(o.turned(90).name().to_string())
            }
        };
    }
    answer
}

/// The arithmetic oracle ran out of search budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoSolution;

/// The noisy oracle's raw response: the exact answer, replaced by a wrong
/// one with probability `epsilon`.
pub fn oracle_answer(problem: &Problem, epsilon: f64, seed: Seed) -> Result<Option<String>, NoSolution> {
    let mut rng = seed::rng(seed);
    let corrupt = rng.random::<f64>() < epsilon;
    Ok(match problem {
        Problem::Arithmetic(p) => {
            let seq = if corrupt {
                corrupt_arith(p, &mut rng)
            } else {
                arith_oracle(p).ok_or(NoSolution)?
            };
            Some(arith::format_final(&seq))
        }
        Problem::Spatial(p) => {
            let answer = if corrupt { corrupt_spatial(p) } else { p.ground_truth.clone() };
            Some(spatial::answer_json(&answer))
        }
        Problem::Synthetic { .. } => None,
    })
}

/// Parses a `CALL <op> <number>` line.
pub fn parse_call(text: &str) -> Option<(ArithOperator, Num)> {
    let line = text.lines().map(str::trim).find(|l| l.starts_with("CALL"))?;
    let mut parts = line["CALL".len()..].split(|c: char| c.is_whitespace() || c == ',' || c == '(' || c == ')');
    let mut tokens = parts.by_ref().filter(|t| !t.is_empty());
    let op: ArithOperator = tokens.next()?.parse().ok()?;
    let num = Num::parse(tokens.next()?)?;
    Some((op, num))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlmOutcome {
    pub raw: String,
    pub turns: usize,
    pub horizon_exceeded: bool,
}

/// Drives one problem through the model. Arithmetic runs the CALL/FINAL
/// tool loop; spatial is a single exchange.
pub fn llm_answer(problem: &Problem, gateway: &dyn ChatBackend, cfg: &LlmTarget) -> Result<LlmOutcome, GatewayError> {
    let request = |messages: Vec<Message>| ChatRequest {
        temperature: cfg.temperature,
        max_output_tokens: cfg.max_output_tokens,
        max_reasoning_tokens: cfg.max_reasoning_tokens,
        ..ChatRequest::new(&cfg.model, messages)
    };
    match problem {
        Problem::Spatial(p) => {
            let resp = gateway.chat(&request(vec![Message::user(p.prompt.clone())]))?;
            Ok(LlmOutcome {
                raw: resp.content,
                turns: 1,
                horizon_exceeded: false,
            })
        }
        Problem::Arithmetic(p) => {
            let mut messages = vec![Message::user(p.prompt.clone())];
            for turn in 1..=cfg.horizon {
                let resp = gateway.chat(&request(messages.clone()))?;
                if arith::parse_final(&resp.content).is_some() || resp.content.lines().any(|l| l.trim().starts_with("FINAL")) {
                    return Ok(LlmOutcome {
                        raw: resp.content,
                        turns: turn,
                        horizon_exceeded: false,
                    });
                }
                let reply = match parse_call(&resp.content) {
                    Some((op, x)) => match arith::apply_op(op, &x) {
                        Ok(v) => v.to_string(),
                        Err(e) => format!("Error: {e}"),
                    },
                    None => "Respond with a single CALL line or a FINAL line.".to_string(),
                };
                messages.push(Message::assistant(resp.content));
                messages.push(Message::user(reply));
            }
            let raw = messages
                .iter()
                .rev()
                .find(|m| m.role == crate::gateway::Role::Assistant)
                .map(|m| m.content.clone())
                .unwrap_or_default();
            Ok(LlmOutcome {
                raw,
                turns: cfg.horizon,
                horizon_exceeded: true,
            })
        }
        Problem::Synthetic { .. } => Ok(LlmOutcome {
            raw: String::new(),
            turns: 0,
            horizon_exceeded: false,
        }),
    }
}

/// A target bound to an environment (for feature lookups) and, for the LLM
/// backend, to a gateway.
pub struct Target {
    pub spec: TargetSpec,
    env_spec: ParameterSpec,
    gateway: Option<Arc<dyn ChatBackend>>,
}

impl Target {
    pub fn new(spec: TargetSpec, env: &Environment, gateway: Option<Arc<dyn ChatBackend>>) -> Result<Self, TargetError> {
        match &spec.backend {
            Backend::OracleNoisy { epsilon } if !(0.0..=1.0).contains(epsilon) => {
                return Err(TargetError::Config(format!("epsilon {epsilon} outside [0, 1]")))
            }
            Backend::SyntheticLogistic { weights, .. } if weights.len() != env.spec.feature_len() => {
                return Err(TargetError::Config(format!(
                    "{} weights for {} feature slots",
                    weights.len(),
                    env.spec.feature_len()
                )))
            }
            Backend::OracleNoisy { .. } if env.kind == EnvKind::Synthetic => {
                return Err(TargetError::Config("the oracle needs a content-bearing environment".into()))
            }
            Backend::Llm(_) if gateway.is_none() => return Err(TargetError::Config("llm backend needs a gateway".into())),
            Backend::Llm(_) if env.kind == EnvKind::Synthetic => {
                return Err(TargetError::Config("synthetic items cannot be posed to a model".into()))
            }
            _ => {}
        }
        if spec.workers == 0 {
            return Err(TargetError::Config("workers must be >= 1".into()));
        }
        Ok(Target {
            spec,
            env_spec: env.spec.clone(),
            gateway,
        })
    }

    /// Success probability of the synthetic backend for a config.
    pub fn success_prob(&self, config: &ParamConfig) -> Option<f64> {
        match &self.spec.backend {
            Backend::SyntheticLogistic { weights, slope, offset } => Some(synthetic_success_prob(
                weights,
                *slope,
                *offset,
                &paramspace::featurize(&self.env_spec, config),
            )),
            _ => None,
        }
    }

    fn item_seed(&self, rollout_seed: Seed, problem: &Problem) -> Seed {
        let content = serde_json::to_string(problem).expect("problems serialize");
        seed::derive(self.spec.seed ^ rollout_seed, "item", seed::of_bytes(content.as_bytes()))
    }

    fn one(&self, index: usize, problem: &Problem, p_success: Option<f64>, rollout_seed: Seed) -> Result<ItemResult, TargetError> {
        let s = self.item_seed(rollout_seed, problem);
        let mut item = ItemResult {
            id: index,
            correct: false,
            raw: String::new(),
            turns: None,
            note: None,
        };
        match &self.spec.backend {
            Backend::SyntheticLogistic { .. } => {
                let p = p_success.expect("computed for synthetic backend");
                let u: f64 = seed::rng(s).random();
                item.correct = u < p;
                item.raw = format!("u={u:.6} p={p:.6}");
            }
            Backend::OracleNoisy { epsilon } => {
                let raw = oracle_answer(problem, *epsilon, s).map_err(|_| TargetError::NoSolutionFound { index })?;
                item.raw = raw.unwrap_or_default();
                item.correct = problem.check_response(&item.raw);
            }
            Backend::Llm(cfg) => {
                let gw = self.gateway.as_deref().expect("checked at construction");
                let out = llm_answer(problem, gw, cfg).map_err(|source| TargetError::Backend { index, source })?;
                item.correct = !out.horizon_exceeded && problem.check_response(&out.raw);
                item.turns = Some(out.turns);
                if out.horizon_exceeded {
                    item.note = Some(format!("horizon of {} exchanges exceeded", cfg.horizon));
                }
                item.raw = out.raw;
            }
        }
        Ok(item)
    }

    /// Scores every problem, fanning out over up to `workers` threads.
    /// Results come back in dataset order.
    pub fn evaluate(&self, dataset: &Dataset, rollout_seed: Seed) -> Result<RolloutResult, TargetError> {
        if dataset.is_empty() {
            return Err(TargetError::EmptyDataset);
        }
        let p_success = self.success_prob(&dataset.config);
        let n = dataset.len();
        let workers = self.spec.workers.min(n);
        if workers <= 1 {
            let items = (0..n)
                .map(|i| self.one(i, &dataset.problems[i], p_success, rollout_seed))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(RolloutResult::from_items(items));
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<ItemResult, TargetError>>>> = Mutex::new((0..n).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let r = self.one(i, &dataset.problems[i], p_success, rollout_seed);
                    slots.lock().expect("result slots")[i] = Some(r);
                });
            }
        });
        let items = slots
            .into_inner()
            .expect("result slots")
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RolloutResult::from_items(items))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::arith::ArithOperator::*;

    fn arith_problem(x: i64, y: i64, gt: Vec<ArithOperator>) -> ArithProblem {
        let mut p = ArithProblem {
            x: Num::int(x),
            y: Num::int(y),
            ground_truth: gt,
            prompt: String::new(),
        };
        p.prompt = arith::render_prompt(&p);
        p
    }

    #[test]
    fn logistic_midpoint_and_monotonicity() {
        assert_eq!(synthetic_success_prob(&[1.0], 10.0, 5.0, &[0.5]), 0.5);
        assert_eq!(synthetic_success_prob(&[0.0, 0.0], 3.0, 1.0, &[0.2, 0.9]), logistic(1.0));
        assert!(synthetic_success_prob(&[1.0], 10.0, 5.0, &[0.8]) < synthetic_success_prob(&[1.0], 10.0, 5.0, &[0.4]));
        let p = synthetic_success_prob(&[1.0], 10.0, 5.0, &[3.0]);
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn oracle_solves_the_worked_example() {
        let p = Problem::Arithmetic(arith_problem(3, 36, vec![Add, Mul]));
        assert_eq!(oracle_answer(&p, 0.0, 1).unwrap().unwrap(), "FINAL add, mul");
        for s in 0..20 {
            let raw = oracle_answer(&p, 1.0, s).unwrap().unwrap();
            assert!(!p.check_response(&raw), "{raw}");
        }
    }

    #[test]
    fn call_lines() {
        assert_eq!(parse_call("I'll try\nCALL add 3"), Some((Add, Num::int(3))));
        assert_eq!(parse_call("CALL sqrt(2.5)"), Some((Sqrt, Num::Float(2.5))));
        assert_eq!(parse_call("CALL nope 2"), None);
    }

    #[test]
    fn rollout_ratio() {
        let items = (0..4)
            .map(|i| ItemResult {
                id: i,
                correct: i != 2,
                raw: String::new(),
                turns: None,
                note: None,
            })
            .collect();
        assert_eq!(RolloutResult::from_items(items).rho_hat, 0.75);
    }

    #[test]
    fn config_checks() {
        let env = Environment::spatial();
        assert!(Target::new(TargetSpec::oracle(1.5), &env, None).is_err());
        assert!(Target::new(TargetSpec::logistic(vec![1.0], 1.0, 0.0), &env, None).is_err());
        let llm = TargetSpec::new(Backend::Llm(LlmTarget {
            model: "m".into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            max_reasoning_tokens: 1024,
            horizon: 16,
        }));
        assert!(Target::new(llm, &env, None).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let spec: TargetSpec = serde_json::from_str(r#"{"backend":"oracle-noisy","epsilon":0.25}"#).unwrap();
        assert_eq!(spec.backend, Backend::OracleNoisy { epsilon: 0.25 });
        assert_eq!(spec.workers, DEFAULT_WORKERS);
        let back = serde_json::to_value(&spec).unwrap();
        assert_eq!(back["backend"], "oracle-noisy");
    }
}
