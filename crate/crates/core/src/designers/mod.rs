//! Designers propose the next configuration from the search history.
//!
//! | strategy             | needs                       |
//! |----------------------|-----------------------------|
//! | `random`             | —                           |
//! | `rs-ppr`             | —                           |
//! | `bon-tm`             | target (probe rollouts)     |
//! | `bon-ml`             | target or a training file   |
//! | `llm`                | gateway                     |
//! | `scripted-bisection` | an int-range knob parameter |

pub mod llm;
pub mod surrogate;

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment};
use crate::gateway::{ChatBackend, GatewayError};
use crate::metrics;
use crate::paramspace::{self, DomainKind, ParamConfig, ParamError, ParameterSpec};
use crate::seed::{self, Seed};
use crate::targets::{Target, TargetError};

pub use llm::LlmDesignerConfig;
pub use surrogate::{bon_ml_select, train_surrogate, RegressorConfig, SurrogateError, SurrogateModel};

#[derive(Debug, Error)]
pub enum DesignerError {
    #[error("designer misconfigured: {0}")]
    Config(String),
    #[error("no JSON object in any of {attempts} responses")]
    UnparseableResponse { attempts: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("reading {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub i: usize,
    pub config: ParamConfig,
    pub rho_hat: f64,
    pub gap: f64,
}

impl HistoryEntry {
    pub fn new(i: usize, config: ParamConfig, rho: f64, rho_hat: f64) -> Self {
        HistoryEntry {
            i,
            config,
            rho_hat,
            gap: metrics::gap(rho, rho_hat),
        }
    }
}

pub struct ProposeCtx<'a> {
    pub spec: &'a ParameterSpec,
    pub rho: f64,
    pub history: &'a [HistoryEntry],
    /// Per-iteration seed.
    pub seed: Seed,
    /// Seed of the whole run, for state built once per run.
    pub run_seed: Seed,
}

pub trait Designer: Send {
    fn name(&self) -> &'static str;
    fn propose(&mut self, ctx: &ProposeCtx<'_>) -> Result<ParamConfig, DesignerError>;
}

/// Where best-of-N draws its candidates from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum CandidateSource {
    #[default]
    Uniform,
    /// Independent LLM proposals.
    Llm(LlmDesignerConfig),
}

fn default_p() -> f64 {
    0.5
}
fn default_delta() -> f64 {
    0.1
}
fn default_capacity() -> usize {
    32
}
fn default_n() -> usize {
    8
}
fn default_bootstrap() -> usize {
    100
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum DesignerSpec {
    Llm(LlmDesignerConfig),
    Random,
    RsPpr {
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_capacity")]
        capacity: usize,
    },
    BonTm {
        #[serde(default = "default_n")]
        n: usize,
        /// Problems per probe; defaults to the environment's rollout size.
        #[serde(default)]
        probe_size: Option<usize>,
        #[serde(default)]
        candidates: CandidateSource,
    },
    BonMl {
        #[serde(default = "default_n")]
        n: usize,
        /// JSON-lines of `{"config": .., "rho_hat": ..}`; when absent the
        /// designer measures `bootstrap` random configs on the target.
        #[serde(default)]
        training: Option<PathBuf>,
        #[serde(default = "default_bootstrap")]
        bootstrap: usize,
        #[serde(default)]
        probe_size: Option<usize>,
        #[serde(default)]
        regressor: RegressorConfig,
        #[serde(default)]
        candidates: CandidateSource,
    },
    ScriptedBisection {
        knob: String,
        /// Whether larger knob values make problems harder.
        #[serde(default = "default_true")]
        higher_is_harder: bool,
    },
}

impl DesignerSpec {
    pub fn rs_ppr() -> Self {
        DesignerSpec::RsPpr {
            p: default_p(),
            delta: default_delta(),
            capacity: default_capacity(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DesignerSpec::Llm(_) => "llm",
            DesignerSpec::Random => "random",
            DesignerSpec::RsPpr { .. } => "rs-ppr",
            DesignerSpec::BonTm { .. } => "bon-tm",
            DesignerSpec::BonMl { .. } => "bon-ml",
            DesignerSpec::ScriptedBisection { .. } => "scripted-bisection",
        }
    }

    /// True when proposals depend only on the seed and the history.
    pub fn is_deterministic(&self) -> bool {
        match self {
            DesignerSpec::Llm(_) => false,
            DesignerSpec::BonTm { candidates, .. } | DesignerSpec::BonMl { candidates, .. } => {
                *candidates == CandidateSource::Uniform
            }
            _ => true,
        }
    }
}

/// Collaborators a designer may need.
#[derive(Clone)]
pub struct DesignerDeps {
    pub env: Environment,
    pub target: Option<Arc<Target>>,
    pub gateway: Option<Arc<dyn ChatBackend>>,
}

pub fn build(spec: &DesignerSpec, deps: DesignerDeps) -> Result<Box<dyn Designer>, DesignerError> {
    let need_target = |what: &str| {
        deps.target
            .clone()
            .ok_or_else(|| DesignerError::Config(format!("{what} needs a target to probe")))
    };
    let candidate_gen = |src: &CandidateSource| -> Result<CandidateGen, DesignerError> {
        Ok(match src {
            CandidateSource::Uniform => CandidateGen::Uniform,
            CandidateSource::Llm(cfg) => CandidateGen::Llm(llm::LlmDesigner::new(cfg.clone(), &deps)?),
        })
    };
    Ok(match spec {
        DesignerSpec::Random => Box::new(RandomDesigner),
        DesignerSpec::RsPpr { p, delta, capacity } => {
            if !(0.0..=1.0).contains(p) || *delta < 0.0 || *capacity == 0 {
                return Err(DesignerError::Config(format!("rs-ppr needs p in [0,1], delta >= 0, capacity >= 1")));
            }
            Box::new(RsPprDesigner::new(*p, *delta, *capacity))
        }
        DesignerSpec::BonTm { n, probe_size, candidates } => {
            if *n == 0 {
                return Err(DesignerError::Config("bon-tm needs n >= 1".into()));
            }
            Box::new(BonTmDesigner {
                n: *n,
                probe_size: probe_size.unwrap_or(deps.env.kind.search_rollout_size()),
                env: deps.env.clone(),
                target: need_target("bon-tm")?,
                candidates: candidate_gen(candidates)?,
            })
        }
        DesignerSpec::BonMl {
            n,
            training,
            bootstrap,
            probe_size,
            regressor,
            candidates,
        } => {
            if *n == 0 {
                return Err(DesignerError::Config("bon-ml needs n >= 1".into()));
            }
            let source = match training {
                Some(path) => TrainingSource::Loaded(load_training(path)?),
                None => TrainingSource::Bootstrap {
                    count: *bootstrap,
                    probe_size: probe_size.unwrap_or(deps.env.kind.search_rollout_size()),
                    target: need_target("bon-ml without a training file")?,
                },
            };
            Box::new(BonMlDesigner {
                n: *n,
                env: deps.env.clone(),
                regressor: regressor.clone(),
                source,
                samples: None,
                candidates: candidate_gen(candidates)?,
            })
        }
        DesignerSpec::ScriptedBisection { knob, higher_is_harder } => {
            match deps.env.spec.params.get(knob).map(|d| &d.kind) {
                Some(DomainKind::IntRange { .. }) => {}
                _ => return Err(DesignerError::Config(format!("bisection knob `{knob}` must be an int-range parameter"))),
            }
            Box::new(BisectionDesigner {
                knob: knob.clone(),
                higher_is_harder: *higher_is_harder,
            })
        }
        DesignerSpec::Llm(cfg) => Box::new(llm::LlmDesigner::new(cfg.clone(), &deps)?),
    })
}

/// One line per iteration, oldest first.
pub fn summarize_feedback(history: &[HistoryEntry], rho: f64) -> String {
    history
        .iter()
        .map(|h| {
            format!(
                "Iteration {}: params={}; observed_accuracy={:.4}; target={}; gap={:.4}",
                h.i,
                h.config.canonical_json(),
                h.rho_hat,
                rho,
                h.gap
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct RandomDesigner;

impl Designer for RandomDesigner {
    fn name(&self) -> &'static str {
        "random"
    }

    fn propose(&mut self, ctx: &ProposeCtx<'_>) -> Result<ParamConfig, DesignerError> {
        Ok(paramspace::sample_uniform(ctx.spec, ctx.seed))
    }
}

/// Configurations whose gap came in at or under Δ, oldest evicted first.
#[derive(Clone, Debug, PartialEq)]
pub struct PprBuffer {
    pub entries: VecDeque<(ParamConfig, f64)>,
    pub capacity: usize,
}

impl PprBuffer {
    pub fn new(capacity: usize) -> Self {
        PprBuffer {
            entries: VecDeque::new(),
            capacity,
        }
    }

    /// Inserts when `gap <= delta`; returns whether it was inserted.
    pub fn offer(&mut self, config: &ParamConfig, gap: f64, delta: f64) -> bool {
        if gap > delta {
            return false;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((config.clone(), gap));
        true
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Draws from the buffer-or-uniform mixture: with probability `p` (or
/// always, when the buffer is empty) a uniform sample, else a perturbed
/// copy of a uniformly chosen buffer entry. The uniform branch returns
/// exactly `sample_uniform(spec, seed)`.
pub fn ppr_draw(buffer: &PprBuffer, p: f64, spec: &ParameterSpec, seed: Seed) -> ParamConfig {
    let coin: f64 = seed::rng(seed::derive(seed, "coin", 0)).random();
    if buffer.is_empty() || coin < p {
        return paramspace::sample_uniform(spec, seed);
    }
    let mut rng = seed::rng(seed::derive(seed, "replay", 0));
    let base = &buffer.entries[rng.random_range(0..buffer.len())].0;
    paramspace::perturb(spec, base, seed::derive(seed, "perturb", 0))
}

/// Offers `last` to the buffer, then draws the next proposal.
pub fn rs_ppr_step(
    mut buffer: PprBuffer,
    p: f64,
    delta: f64,
    spec: &ParameterSpec,
    last: Option<&HistoryEntry>,
    seed: Seed,
) -> (ParamConfig, PprBuffer) {
    if let Some(h) = last {
        buffer.offer(&h.config, h.gap, delta);
    }
    (ppr_draw(&buffer, p, spec, seed), buffer)
}

pub struct RsPprDesigner {
    pub p: f64,
    pub delta: f64,
    pub buffer: PprBuffer,
    /// History entries already offered to the buffer.
    seen: usize,
}

impl RsPprDesigner {
    pub fn new(p: f64, delta: f64, capacity: usize) -> Self {
        RsPprDesigner {
            p,
            delta,
            buffer: PprBuffer::new(capacity),
            seen: 0,
        }
    }
}

impl Designer for RsPprDesigner {
    fn name(&self) -> &'static str {
        "rs-ppr"
    }

    fn propose(&mut self, ctx: &ProposeCtx<'_>) -> Result<ParamConfig, DesignerError> {
        // replaying the whole history also rebuilds the buffer after a resume
        for h in &ctx.history[self.seen.min(ctx.history.len())..] {
            self.buffer.offer(&h.config, h.gap, self.delta);
        }
        self.seen = ctx.history.len();
        Ok(ppr_draw(&self.buffer, self.p, ctx.spec, ctx.seed))
    }
}

enum CandidateGen {
    Uniform,
    Llm(llm::LlmDesigner),
}

impl CandidateGen {
    fn draw(&mut self, n: usize, ctx: &ProposeCtx<'_>) -> Result<Vec<ParamConfig>, DesignerError> {
        (0..n)
            .map(|k| {
                let s = seed::derive(ctx.seed, "candidate", k as u64);
                match self {
                    CandidateGen::Uniform => Ok(paramspace::sample_uniform(ctx.spec, s)),
                    CandidateGen::Llm(d) => d.propose(ctx),
                }
            })
            .collect()
    }
}

/// Measured gap of each candidate on an `n_s`-problem probe. Every candidate
/// sees the same problem and evaluation seeds.
pub fn probe_gaps(
    candidates: &[ParamConfig],
    rho: f64,
    probe_size: usize,
    env: &Environment,
    target: &Target,
    seed: Seed,
) -> Result<Vec<f64>, DesignerError> {
    let data_seed = seed::derive(seed, "probe-data", 0);
    let eval_seed = seed::derive(seed, "probe-eval", 0);
    candidates
        .iter()
        .map(|c| {
            let data = env.generate(c, probe_size, data_seed)?;
            let r = target.evaluate(&data, eval_seed)?;
            Ok(metrics::gap(rho, r.rho_hat))
        })
        .collect()
}

/// Index of the candidate with the smallest measured gap (earliest on ties),
/// along with all measured gaps.
pub fn bon_tm_select(
    candidates: &[ParamConfig],
    rho: f64,
    probe_size: usize,
    env: &Environment,
    target: &Target,
    seed: Seed,
) -> Result<(usize, Vec<f64>), DesignerError> {
    if candidates.is_empty() {
        return Err(DesignerError::Config("no candidates".into()));
    }
    if probe_size == 0 {
        return Err(DesignerError::Config("probe size must be >= 1".into()));
    }
    let gaps = probe_gaps(candidates, rho, probe_size, env, target, seed)?;
    Ok((surrogate::argmin(&gaps), gaps))
}

pub struct BonTmDesigner {
    n: usize,
    probe_size: usize,
    env: Environment,
    target: Arc<Target>,
    candidates: CandidateGen,
}

impl Designer for BonTmDesigner {
    fn name(&self) -> &'static str {
        "bon-tm"
    }

    fn propose(&mut self, ctx: &ProposeCtx<'_>) -> Result<ParamConfig, DesignerError> {
        let cands = self.candidates.draw(self.n, ctx)?;
        let (best, _) = bon_tm_select(&cands, ctx.rho, self.probe_size, &self.env, &self.target, ctx.seed)?;
        Ok(cands[best].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub config: ParamConfig,
    pub rho_hat: f64,
}

fn load_training(path: &PathBuf) -> Result<Vec<TrainingSample>, DesignerError> {
    let io = |reason: String| DesignerError::Io {
        path: path.clone(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| io(format!("line {}: {e}", n + 1))))
        .collect()
}

enum TrainingSource {
    Loaded(Vec<TrainingSample>),
    Bootstrap {
        count: usize,
        probe_size: usize,
        target: Arc<Target>,
    },
}

/// Measures `count` uniformly sampled configs on the target.
pub fn bootstrap_samples(
    env: &Environment,
    target: &Target,
    count: usize,
    probe_size: usize,
    seed: Seed,
) -> Result<Vec<TrainingSample>, DesignerError> {
    (0..count)
        .map(|k| {
            let s = seed::derive(seed, "bootstrap", k as u64);
            let config = paramspace::sample_uniform(&env.spec, s);
            let data = env.generate(&config, probe_size, seed::derive(s, "data", 0))?;
            let r = target.evaluate(&data, seed::derive(s, "eval", 0))?;
            Ok(TrainingSample {
                config,
                rho_hat: r.rho_hat,
            })
        })
        .collect()
}

pub struct BonMlDesigner {
    n: usize,
    env: Environment,
    regressor: RegressorConfig,
    source: TrainingSource,
    samples: Option<Vec<TrainingSample>>,
    candidates: CandidateGen,
}

impl Designer for BonMlDesigner {
    fn name(&self) -> &'static str {
        "bon-ml"
    }

    fn propose(&mut self, ctx: &ProposeCtx<'_>) -> Result<ParamConfig, DesignerError> {
        if self.samples.is_none() {
            self.samples = Some(match &self.source {
                TrainingSource::Loaded(s) => s.clone(),
                TrainingSource::Bootstrap {
                    count,
                    probe_size,
                    target,
                } => {
                    // keyed on the run seed so a resumed run rebuilds the same set
                    bootstrap_samples(&self.env, target, *count, *probe_size, seed::derive(ctx.run_seed, "bon-ml", 0))?
                }
            });
        }
        // gaps depend on ρ, so the stored accuracies are converted here; the
        // run's own measurements join the training set as they arrive
        let mut train: Vec<(ParamConfig, f64)> = self
            .samples
            .as_ref()
            .expect("filled above")
            .iter()
            .map(|s| (s.config.clone(), metrics::gap(ctx.rho, s.rho_hat)))
            .collect();
        train.extend(ctx.history.iter().map(|h| (h.config.clone(), h.gap)));
        let model = train_surrogate(&train, ctx.spec, &self.regressor)?;
        let cands = self.candidates.draw(self.n, ctx)?;
        Ok(cands[bon_ml_select(&model, ctx.spec, &cands)].clone())
    }
}

/// Bisects one integer knob against the observed accuracies; everything
/// else stays at its default.
pub struct BisectionDesigner {
    knob: String,
    higher_is_harder: bool,
}

impl BisectionDesigner {
    pub fn new(knob: &str, higher_is_harder: bool) -> Self {
        BisectionDesigner {
            knob: knob.to_string(),
            higher_is_harder,
        }
    }

    /// Current `[lo, hi]` bracket implied by the history.
    pub fn bracket(&self, spec: &ParameterSpec, rho: f64, history: &[HistoryEntry]) -> (i64, i64) {
        let Some(DomainKind::IntRange { low, high }) = spec.params.get(&self.knob).map(|d| &d.kind) else {
            return (0, 0);
        };
        let (mut lo, mut hi) = (*low, *high);
        for h in history {
            let Some(v) = h.config.int(&self.knob) else { continue };
            let too_easy = h.rho_hat > rho;
            if too_easy == self.higher_is_harder {
                lo = lo.max(v);
            } else {
                hi = hi.min(v);
            }
        }
        if lo > hi {
            // contradictory noisy observations: fall back to the latest one
            let v = history.last().and_then(|h| h.config.int(&self.knob)).unwrap_or(lo);
            return (v, v);
        }
        (lo, hi)
    }
}

impl Designer for BisectionDesigner {
    fn name(&self) -> &'static str {
        "scripted-bisection"
    }

    fn propose(&mut self, ctx: &ProposeCtx<'_>) -> Result<ParamConfig, DesignerError> {
        let (lo, hi) = self.bracket(ctx.spec, ctx.rho, ctx.history);
        let mid = lo + (hi - lo) / 2;
        let mut config = paramspace::project(ctx.spec, &ParamConfig::new())?;
        config.set(&self.knob, mid);
        Ok(paramspace::project(ctx.spec, &config)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramspace::ParamDomain;

    fn knob_spec() -> ParameterSpec {
        ParameterSpec::new("knob").param("level", ParamDomain::int_range(0, 100).with_default(0))
    }

    fn entry(i: usize, level: i64, rho: f64, rho_hat: f64) -> HistoryEntry {
        HistoryEntry::new(i, ParamConfig::new().with("level", level), rho, rho_hat)
    }

    fn ctx<'a>(spec: &'a ParameterSpec, history: &'a [HistoryEntry], seed: Seed) -> ProposeCtx<'a> {
        ProposeCtx {
            spec,
            rho: 0.25,
            history,
            seed,
            run_seed: 0,
        }
    }

    #[test]
    fn feedback_lines() {
        assert_eq!(summarize_feedback(&[], 0.25), "");
        let h = [entry(1, 10, 0.25, 1.0), entry(2, 40, 0.25, 0.5)];
        let text = summarize_feedback(&h, 0.25);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "Iteration 1: params={\"level\":10}; observed_accuracy=1.0000; target=0.25; gap=0.7500"
        );
        assert!(lines[1].starts_with("Iteration 2:"));
    }

    #[test]
    fn random_delegates_to_sampler() {
        let spec = knob_spec();
        let c = RandomDesigner.propose(&ctx(&spec, &[], 17)).unwrap();
        assert_eq!(c, paramspace::sample_uniform(&spec, 17));
    }

    #[test]
    fn buffer_threshold_is_inclusive() {
        let mut b = PprBuffer::new(2);
        let c = ParamConfig::new().with("level", 1i64);
        assert!(b.offer(&c, 0.1, 0.1));
        assert!(!b.offer(&c, 0.11, 0.1));
        b.offer(&c.clone().with("level", 2i64), 0.0, 0.1);
        b.offer(&c.clone().with("level", 3i64), 0.0, 0.1);
        assert_eq!(b.len(), 2);
        assert_eq!(b.entries[0].0.int("level"), Some(2));
    }

    #[test]
    fn ppr_falls_back_to_uniform() {
        let spec = knob_spec();
        let mut d = RsPprDesigner::new(0.0, 0.1, 32);
        // empty buffer: uniform even though p = 0
        assert_eq!(d.propose(&ctx(&spec, &[], 5)).unwrap(), paramspace::sample_uniform(&spec, 5));
        let h = [entry(1, 50, 0.25, 0.3)];
        let next = d.propose(&ctx(&spec, &h, 6)).unwrap();
        assert_eq!(d.buffer.len(), 1);
        assert!((next.int("level").unwrap() - 50).abs() <= 5);
        // p = 1 always samples uniformly
        let (c, _) = rs_ppr_step(d.buffer.clone(), 1.0, 0.1, &spec, None, 7);
        assert_eq!(c, paramspace::sample_uniform(&spec, 7));
    }

    #[test]
    fn bisection_halves_the_bracket() {
        let spec = knob_spec();
        let mut d = BisectionDesigner::new("level", true);
        assert_eq!(d.propose(&ctx(&spec, &[], 0)).unwrap().int("level"), Some(50));
        // at 50 the target was too easy: go harder
        let h = [entry(1, 50, 0.25, 0.6)];
        assert_eq!(d.propose(&ctx(&spec, &h, 0)).unwrap().int("level"), Some(75));
        let h = [entry(1, 50, 0.25, 0.6), entry(2, 75, 0.25, 0.1)];
        assert_eq!(d.bracket(&spec, 0.25, &h), (50, 75));
        assert_eq!(d.propose(&ctx(&spec, &h, 0)).unwrap().int("level"), Some(62));
    }

    #[test]
    fn spec_json_defaults() {
        let d: DesignerSpec = serde_json::from_str(r#"{"strategy":"rs-ppr"}"#).unwrap();
        assert_eq!(d, DesignerSpec::rs_ppr());
        let d: DesignerSpec = serde_json::from_str(r#"{"strategy":"bon-tm","n":4}"#).unwrap();
        assert_eq!(
            d,
            DesignerSpec::BonTm {
                n: 4,
                probe_size: None,
                candidates: CandidateSource::Uniform
            }
        );
        let d: DesignerSpec = serde_json::from_str(r#"{"strategy":"scripted-bisection","knob":"level"}"#).unwrap();
        assert!(d.is_deterministic());
    }
}
