//! The search loop, its JSON-lines run log, and the evaluation phase.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::designers::{Designer, DesignerError, DesignerSpec, HistoryEntry, ProposeCtx};
use crate::env::{EnvError, Environment};
use crate::metrics::{self, MetricsError, ReportRow};
use crate::paramspace::{self, ParamConfig, ParameterSpec};
use crate::seed::{self, Seed};
use crate::targets::{Target, TargetError, TargetSpec};

pub const DEFAULT_ITERATIONS: usize = 10;
pub const DEFAULT_EVAL_SEEDS: usize = 3;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid search setup: {0}")]
    Setup(String),
    #[error("iteration {i}: {source}")]
    Backend {
        i: usize,
        #[source]
        source: TargetError,
    },
    #[error("evaluation seed #{seed_index}: {source}")]
    Evaluation {
        seed_index: usize,
        #[source]
        source: EvalFailure,
    },
    #[error("run log {path}: line {line}: {reason}")]
    CorruptLog { path: PathBuf, line: usize, reason: String },
    #[error("run log {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Error)]
pub enum EvalFailure {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Target(#[from] TargetError),
}

/// Everything that determines a search run, as stored in the log header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSetup {
    pub spec: ParameterSpec,
    pub designer: DesignerSpec,
    pub target: TargetSpec,
    pub rho: f64,
    #[serde(rename = "I")]
    pub iterations: usize,
    pub n_s: usize,
    pub seed: Seed,
}

impl SearchSetup {
    pub fn check(&self) -> Result<(), OrchestratorError> {
        if self.iterations == 0 {
            return Err(OrchestratorError::Setup("need at least one iteration".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(OrchestratorError::Setup(format!("target accuracy must lie in (0, 1), got {}", self.rho)));
        }
        if self.n_s == 0 {
            return Err(OrchestratorError::Setup("rollout size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum LogRecord {
    Header {
        #[serde(flatten)]
        setup: SearchSetup,
        /// Unix seconds; null unless timing was requested.
        started_at: Option<u64>,
    },
    Iteration {
        i: usize,
        config: ParamConfig,
        rho_hat: f64,
        gap: f64,
        duration_ms: Option<u64>,
    },
    Skipped {
        i: usize,
        error: String,
    },
    Footer {
        best_index: Option<usize>,
        best_gap: Option<f64>,
    },
}

/// Append-only sink for log records; every record is flushed as written.
pub struct RunLog {
    path: Option<PathBuf>,
    out: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn disabled() -> Self {
        RunLog { path: None, out: None }
    }

    pub fn create(path: &Path) -> Result<Self, OrchestratorError> {
        let f = File::create(path).map_err(|e| io_err(path, e))?;
        Ok(RunLog {
            path: Some(path.to_path_buf()),
            out: Some(BufWriter::new(f)),
        })
    }

    fn append(path: &Path) -> Result<Self, OrchestratorError> {
        let f = OpenOptions::new().append(true).open(path).map_err(|e| io_err(path, e))?;
        Ok(RunLog {
            path: Some(path.to_path_buf()),
            out: Some(BufWriter::new(f)),
        })
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<(), OrchestratorError> {
        let (Some(out), Some(path)) = (self.out.as_mut(), self.path.as_ref()) else {
            return Ok(());
        };
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> OrchestratorError {
    OrchestratorError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRun {
    pub setup: SearchSetup,
    pub history: Vec<HistoryEntry>,
    /// Iterations that produced no measurement.
    pub skipped: Vec<usize>,
    pub best_index: Option<usize>,
    pub best_gap: Option<f64>,
}

impl SearchRun {
    fn new(setup: SearchSetup) -> Self {
        SearchRun {
            setup,
            history: Vec::new(),
            skipped: Vec::new(),
            best_index: None,
            best_gap: None,
        }
    }

    /// The selected configuration.
    pub fn best_config(&self) -> Option<&ParamConfig> {
        let i = self.best_index?;
        self.history.iter().find(|h| h.i == i).map(|h| &h.config)
    }

    fn record(&mut self, entry: HistoryEntry) {
        // strict comparison keeps the earliest of equal gaps
        if self.best_gap.is_none_or(|g| entry.gap < g) {
            self.best_gap = Some(entry.gap);
            self.best_index = Some(entry.i);
        }
        self.history.push(entry);
    }

    /// Index of the next iteration to run (1-based).
    pub fn next_index(&self) -> usize {
        self.history.len() + self.skipped.len() + 1
    }

    pub fn is_complete(&self) -> bool {
        self.next_index() > self.setup.iterations
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SearchOptions {
    /// Record wall-clock fields; off by default so logs are reproducible.
    pub timing: bool,
}

/// Seeds for iteration `i`, a pure function of the run seed.
pub fn iteration_seed(run_seed: Seed, stream: &str, i: usize) -> Seed {
    seed::derive(run_seed, stream, i as u64)
}

enum Outcome {
    Measured(HistoryEntry),
    Skipped(String),
}

fn propose_checked(
    designer: &mut dyn Designer,
    setup: &SearchSetup,
    history: &[HistoryEntry],
    seed: Seed,
) -> Result<ParamConfig, DesignerError> {
    let ctx = ProposeCtx {
        spec: &setup.spec,
        rho: setup.rho,
        history,
        seed,
        run_seed: setup.seed,
    };
    let proposal = designer.propose(&ctx)?;
    Ok(paramspace::project(&setup.spec, &proposal)?)
}

fn run_iteration(
    i: usize,
    setup: &SearchSetup,
    env: &Environment,
    target: &Target,
    designer: &mut dyn Designer,
    history: &[HistoryEntry],
) -> Result<Outcome, OrchestratorError> {
    let config = match propose_checked(designer, setup, history, iteration_seed(setup.seed, "propose", i)) {
        Ok(c) => c,
        // one retry with fresh randomness, then give up on this iteration
        Err(_) => match propose_checked(designer, setup, history, iteration_seed(setup.seed, "propose-retry", i)) {
            Ok(c) => c,
            Err(e) => return Ok(Outcome::Skipped(format!("designer: {e}"))),
        },
    };
    let data = match env.generate(&config, setup.n_s, iteration_seed(setup.seed, "data", i)) {
        Ok(d) => d,
        Err(e) => return Ok(Outcome::Skipped(format!("generation: {e}"))),
    };
    let result = target
        .evaluate(&data, iteration_seed(setup.seed, "rollout", i))
        .map_err(|source| OrchestratorError::Backend { i, source })?;
    Ok(Outcome::Measured(HistoryEntry::new(i, config, setup.rho, result.rho_hat)))
}

fn continue_search(
    mut run: SearchRun,
    env: &Environment,
    target: &Target,
    designer: &mut dyn Designer,
    log: &mut RunLog,
    opts: SearchOptions,
) -> Result<SearchRun, OrchestratorError> {
    while !run.is_complete() {
        let i = run.next_index();
        let started = Instant::now();
        match run_iteration(i, &run.setup, env, target, designer, &run.history)? {
            Outcome::Measured(entry) => {
                log.write(&LogRecord::Iteration {
                    i,
                    config: entry.config.clone(),
                    rho_hat: entry.rho_hat,
                    gap: entry.gap,
                    duration_ms: opts.timing.then(|| started.elapsed().as_millis() as u64),
                })?;
                run.record(entry);
            }
            Outcome::Skipped(error) => {
                log.write(&LogRecord::Skipped { i, error })?;
                run.skipped.push(i);
            }
        }
    }
    log.write(&LogRecord::Footer {
        best_index: run.best_index,
        best_gap: run.best_gap,
    })?;
    Ok(run)
}

/// Runs the propose → generate → evaluate → feedback loop for
/// `setup.iterations` rounds. Each record reaches the log before the next
/// iteration starts; a target failure aborts with the log intact up to the
/// last finished iteration.
pub fn run_search(
    setup: SearchSetup,
    env: &Environment,
    target: &Target,
    designer: &mut dyn Designer,
    log: &mut RunLog,
    opts: SearchOptions,
) -> Result<SearchRun, OrchestratorError> {
    setup.check()?;
    let started_at = opts
        .timing
        .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()));
    log.write(&LogRecord::Header {
        setup: setup.clone(),
        started_at,
    })?;
    continue_search(SearchRun::new(setup), env, target, designer, log, opts)
}

/// Parses a run log back into the run state it describes.
pub fn read_log(path: &Path) -> Result<SearchRun, OrchestratorError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let corrupt = |line: usize, reason: String| OrchestratorError::CorruptLog {
        path: path.to_path_buf(),
        line,
        reason,
    };
    if !text.is_empty() && !text.ends_with('\n') {
        let n = text.lines().count();
        return Err(corrupt(n, "truncated record".into()));
    }
    let mut run: Option<SearchRun> = None;
    let mut finished = false;
    for (k, line) in text.lines().enumerate() {
        let n = k + 1;
        let record: LogRecord = serde_json::from_str(line).map_err(|e| corrupt(n, e.to_string()))?;
        if finished {
            return Err(corrupt(n, "record after footer".into()));
        }
        match (record, run.as_mut()) {
            (LogRecord::Header { setup, .. }, None) => run = Some(SearchRun::new(setup)),
            (LogRecord::Header { .. }, Some(_)) => return Err(corrupt(n, "second header".into())),
            (_, None) => return Err(corrupt(n, "missing header".into())),
            (LogRecord::Iteration { i, config, rho_hat, gap, .. }, Some(r)) => {
                if i != r.next_index() {
                    return Err(corrupt(n, format!("expected iteration {}, found {i}", r.next_index())));
                }
                r.record(HistoryEntry { i, config, rho_hat, gap });
            }
            (LogRecord::Skipped { i, .. }, Some(r)) => {
                if i != r.next_index() {
                    return Err(corrupt(n, format!("expected iteration {}, found {i}", r.next_index())));
                }
                r.skipped.push(i);
            }
            (LogRecord::Footer { .. }, Some(_)) => finished = true,
        }
    }
    run.ok_or_else(|| corrupt(0, "empty log".into()))
}

/// Continues an interrupted run, appending to the same log. Per-iteration
/// seeds depend only on the run seed and the index, so the result matches
/// an uninterrupted run.
pub fn resume(
    path: &Path,
    env: &Environment,
    target: &Target,
    designer: &mut dyn Designer,
    opts: SearchOptions,
) -> Result<SearchRun, OrchestratorError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let run = read_log(path)?;
    if text.lines().last().is_some_and(|l| l.contains("\"record\":\"footer\"")) {
        return Ok(run);
    }
    let mut log = RunLog::append(path)?;
    continue_search(run, env, target, designer, &mut log, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ParamConfig,
    pub eval_size: usize,
    pub rho: f64,
    pub seeds: Vec<Seed>,
    pub rho_hats: Vec<f64>,
    pub gaps: Vec<f64>,
    pub mean_gap: f64,
    /// 95% half-width over per-seed gaps; absent with a single seed.
    pub ci_half_width: Option<f64>,
}

impl EvalReport {
    pub fn from_rho_hats(config: ParamConfig, eval_size: usize, rho: f64, seeds: Vec<Seed>, rho_hats: Vec<f64>) -> Result<Self, MetricsError> {
        let gaps: Vec<f64> = rho_hats.iter().map(|r| metrics::gap(rho, *r)).collect();
        if gaps.is_empty() {
            return Err(MetricsError::InsufficientData(0));
        }
        let ci_half_width = match metrics::aggregate_ci(&gaps, 0.95) {
            Ok((_, hw)) => Some(hw),
            Err(MetricsError::InsufficientData(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(EvalReport {
            config,
            eval_size,
            rho,
            seeds,
            mean_gap: metrics::mean(&gaps),
            rho_hats,
            gaps,
            ci_half_width,
        })
    }

    pub fn row(&self, level: &str) -> Result<ReportRow, MetricsError> {
        ReportRow::from_seeds(level, self.rho, &self.rho_hats)
    }
}

/// Default evaluation seeds: `derive(run_seed, "eval", k)` for k < 3.
pub fn default_eval_seeds(run_seed: Seed) -> Vec<Seed> {
    (0..DEFAULT_EVAL_SEEDS).map(|k| seed::derive(run_seed, "eval", k as u64)).collect()
}

/// Measures `config` on a fresh `eval_size`-problem dataset per seed.
pub fn run_evaluation(
    config: &ParamConfig,
    env: &Environment,
    target: &Target,
    rho: f64,
    eval_size: usize,
    seeds: &[Seed],
) -> Result<EvalReport, OrchestratorError> {
    if eval_size == 0 || seeds.is_empty() {
        return Err(OrchestratorError::Setup("evaluation needs eval_size >= 1 and at least one seed".into()));
    }
    let mut rho_hats = Vec::with_capacity(seeds.len());
    for (seed_index, &s) in seeds.iter().enumerate() {
        let fail = |source: EvalFailure| OrchestratorError::Evaluation { seed_index, source };
        let data = env
            .generate(config, eval_size, seed::derive(s, "data", 0))
            .map_err(|e| fail(e.into()))?;
        let r = target.evaluate(&data, seed::derive(s, "rollout", 0)).map_err(|e| fail(e.into()))?;
        rho_hats.push(r.rho_hat);
    }
    Ok(EvalReport::from_rho_hats(config.clone(), eval_size, rho, seeds.to_vec(), rho_hats)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: usize, gap: f64) -> HistoryEntry {
        HistoryEntry {
            i,
            config: ParamConfig::new(),
            rho_hat: 0.5 + gap,
            gap,
        }
    }

    fn setup() -> SearchSetup {
        SearchSetup {
            spec: ParameterSpec::new("x"),
            designer: DesignerSpec::Random,
            target: TargetSpec::oracle(0.0),
            rho: 0.5,
            iterations: 3,
            n_s: 1,
            seed: 0,
        }
    }

    #[test]
    fn best_is_earliest_minimum() {
        let mut run = SearchRun::new(setup());
        run.record(entry(1, 0.3));
        run.record(entry(2, 0.1));
        assert_eq!((run.best_index, run.best_gap), (Some(2), Some(0.1)));
        run.record(entry(3, 0.1));
        assert_eq!(run.best_index, Some(2));
        assert!(run.is_complete());
    }

    #[test]
    fn setup_checks() {
        assert!(setup().check().is_ok());
        assert!(SearchSetup { iterations: 0, ..setup() }.check().is_err());
        assert!(SearchSetup { rho: 1.0, ..setup() }.check().is_err());
    }

    #[test]
    fn eval_report_hand_computed() {
        let r = EvalReport::from_rho_hats(ParamConfig::new(), 10, 0.3, vec![1, 2, 3], vec![0.2, 0.3, 0.4]).unwrap();
        assert!((r.mean_gap - 0.2 / 3.0).abs() < 1e-12);
        assert!(r.ci_half_width.is_some());
        let one = EvalReport::from_rho_hats(ParamConfig::new(), 10, 0.3, vec![1], vec![0.2]).unwrap();
        assert_eq!(one.ci_half_width, None);
    }

    #[test]
    fn header_round_trips() {
        let rec = LogRecord::Header {
            setup: setup(),
            started_at: None,
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.starts_with("{\"record\":\"header\""));
        assert!(line.contains("\"I\":3"));
        assert_eq!(serde_json::from_str::<LogRecord>(&line).unwrap(), rec);
    }
}
