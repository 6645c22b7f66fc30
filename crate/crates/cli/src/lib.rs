//! Config loading and the `tune`, `generate`, `evaluate` and `report` commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use difftune_core::designers::{self, CandidateSource, DesignerDeps, DesignerSpec};
use difftune_core::env::{Dataset, EnvKind, Environment, Problem};
use difftune_core::gateway::{self, ChatBackend, GatewayMode, LiveBackend, UreqTransport};
use difftune_core::metrics::{self, ReportRow};
use difftune_core::orchestrator::{self, EvalReport, OrchestratorError, RunLog, SearchOptions, SearchSetup};
use difftune_core::paramspace::{self, ParamConfig, ParameterSpec};
use difftune_core::seed::{self, Seed};
use difftune_core::targets::{Backend, RolloutResult, Target, TargetSpec};

pub const RUN_LOG: &str = "run_log.jsonl";
pub const BEST_CONFIG: &str = "best_config.json";
pub const EVAL_REPORT: &str = "eval_report.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn backend_err(e: impl std::fmt::Display) -> CliError {
    CliError::Backend(e.to_string())
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default)]
    pub mode: GatewayMode,
    /// Transcript file for record/replay.
    #[serde(default)]
    pub store: Option<PathBuf>,
}

fn default_iterations() -> usize {
    orchestrator::DEFAULT_ITERATIONS
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One run, as read from a JSON file. Relative paths resolve against the
/// working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub environment: EnvKind,
    /// Design space; required for (and only allowed with) synthetic environments.
    #[serde(default)]
    pub spec: Option<ParameterSpec>,
    pub designer: DesignerSpec,
    pub target: TargetSpec,
    #[serde(default)]
    pub level: Option<String>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub n_s: Option<usize>,
    #[serde(default)]
    pub eval_size: Option<usize>,
    #[serde(default)]
    pub seed: Seed,
    /// Evaluation seeds; three derived from `seed` when absent.
    #[serde(default)]
    pub seeds: Option<Vec<Seed>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub gateway: GatewayConfig,
    /// Record wall-clock fields in the run log.
    #[serde(default)]
    pub timing: bool,
}

/// Flags that override config fields of the same name.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub level: Option<String>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long = "n_s")]
    pub n_s: Option<usize>,
    #[arg(long = "eval_size")]
    pub eval_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<Seed>,
    #[arg(long = "output_dir")]
    pub output_dir: Option<PathBuf>,
    #[arg(long = "gateway_mode")]
    pub gateway_mode: Option<GatewayMode>,
    #[arg(long = "gateway_store")]
    pub gateway_store: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        serde_json::from_str(&read(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        // a level flag replaces an explicit ρ from the file and vice versa
        if let Some(l) = &o.level {
            self.level = Some(l.clone());
            self.rho = None;
        }
        if let Some(r) = o.rho {
            self.rho = Some(r);
            if o.level.is_none() {
                self.level = None;
            }
        }
        if let Some(v) = o.iterations {
            self.iterations = v;
        }
        if let Some(v) = o.n_s {
            self.n_s = Some(v);
        }
        if let Some(v) = o.eval_size {
            self.eval_size = Some(v);
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.gateway_mode {
            self.gateway.mode = v;
        }
        if let Some(v) = &o.gateway_store {
            self.gateway.store = Some(v.clone());
        }
    }

    /// Level name (registered or "custom") and target accuracy.
    pub fn target_accuracy(&self) -> Result<(String, f64), CliError> {
        match (&self.level, self.rho) {
            (Some(_), Some(_)) => Err(CliError::Config("set either `level` or `rho`, not both".into())),
            (None, None) => Err(CliError::Config("one of `level` or `rho` is required".into())),
            (Some(name), None) => {
                let l = metrics::level_of(name).map_err(config_err)?;
                Ok((l.name, l.rho))
            }
            (None, Some(rho)) => {
                if !(rho > 0.0 && rho < 1.0) {
                    return Err(CliError::Config(format!("rho must lie in (0, 1), got {rho}")));
                }
                Ok((metrics::level_name(rho).unwrap_or("custom").to_string(), rho))
            }
        }
    }

    pub fn environment(&self) -> Result<Environment, CliError> {
        match (self.environment, &self.spec) {
            (EnvKind::Synthetic, Some(spec)) => {
                spec.check().map_err(config_err)?;
                Ok(Environment::synthetic(spec.clone()))
            }
            (EnvKind::Synthetic, None) => Err(CliError::Config("synthetic environments need a `spec`".into())),
            (kind, None) => Ok(Environment::builtin(kind).expect("built-in kind")),
            (_, Some(_)) => Err(CliError::Config("`spec` is only accepted for synthetic environments".into())),
        }
    }

    pub fn rollout_size(&self) -> usize {
        self.n_s.unwrap_or(self.environment.search_rollout_size())
    }

    pub fn evaluation_size(&self) -> usize {
        self.eval_size.unwrap_or(self.environment.eval_size())
    }

    pub fn eval_seeds(&self) -> Vec<Seed> {
        self.seeds.clone().unwrap_or_else(|| orchestrator::default_eval_seeds(self.seed))
    }

    fn needs_gateway(&self) -> bool {
        let llm_candidates = |c: &CandidateSource| matches!(c, CandidateSource::Llm(_));
        matches!(self.target.backend, Backend::Llm(_))
            || match &self.designer {
                DesignerSpec::Llm(_) => true,
                DesignerSpec::BonTm { candidates, .. } | DesignerSpec::BonMl { candidates, .. } => llm_candidates(candidates),
                _ => false,
            }
    }

    /// The chat gateway, if any component talks to a model.
    pub fn gateway(&self) -> Result<Option<Arc<dyn ChatBackend>>, CliError> {
        if !self.needs_gateway() {
            return Ok(None);
        }
        let live: Arc<dyn ChatBackend> = Arc::new(LiveBackend::from_env(UreqTransport::default()));
        gateway::record_replay(self.gateway.mode, self.gateway.store.as_deref(), live)
            .map(Some)
            .map_err(backend_err)
    }
}

pub struct Prepared {
    pub config: RunConfig,
    pub level: String,
    pub rho: f64,
    pub env: Environment,
    pub target: Arc<Target>,
    pub gateway: Option<Arc<dyn ChatBackend>>,
}

pub fn prepare(config_path: &Path, overrides: &Overrides) -> Result<Prepared, CliError> {
    let mut config = RunConfig::load(config_path)?;
    config.apply(overrides);
    let (level, rho) = config.target_accuracy()?;
    let env = config.environment()?;
    let gateway = config.gateway()?;
    let target = Arc::new(Target::new(config.target.clone(), &env, gateway.clone()).map_err(config_err)?);
    Ok(Prepared {
        config,
        level,
        rho,
        env,
        target,
        gateway,
    })
}

fn orchestrator_err(e: OrchestratorError) -> CliError {
    match e {
        OrchestratorError::Backend { .. } | OrchestratorError::Evaluation { .. } => backend_err(e),
        OrchestratorError::Io { .. } => CliError::Io(e.to_string()),
        OrchestratorError::Setup(_) | OrchestratorError::CorruptLog { .. } | OrchestratorError::Metrics(_) => config_err(e),
    }
}

#[derive(Args, Clone, Debug)]
pub struct TuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue an interrupted run from the log in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Evaluate the selected configuration afterwards.
    #[arg(long)]
    pub evaluate: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Runs the search and writes the run log and the selected configuration
/// (plus an evaluation report when asked) into the output directory.
pub fn cmd_tune(args: &TuneArgs) -> Result<orchestrator::SearchRun, CliError> {
    let p = prepare(&args.config, &args.overrides)?;
    let deps = DesignerDeps {
        env: p.env.clone(),
        target: Some(p.target.clone()),
        gateway: p.gateway.clone(),
    };
    let mut designer = designers::build(&p.config.designer, deps).map_err(config_err)?;
    let out = &p.config.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let log_path = out.join(RUN_LOG);
    let opts = SearchOptions {
        timing: p.config.timing,
    };
    let run = if args.resume {
        orchestrator::resume(&log_path, &p.env, &p.target, designer.as_mut(), opts)
    } else {
        let setup = SearchSetup {
            spec: p.env.spec.clone(),
            designer: p.config.designer.clone(),
            target: p.config.target.clone(),
            rho: p.rho,
            iterations: p.config.iterations,
            n_s: p.config.rollout_size(),
            seed: p.config.seed,
        };
        let mut log = RunLog::create(&log_path).map_err(orchestrator_err)?;
        orchestrator::run_search(setup, &p.env, &p.target, designer.as_mut(), &mut log, opts)
    }
    .map_err(orchestrator_err)?;

    let Some(best) = run.best_config() else {
        return Err(CliError::Backend("every iteration was skipped; no configuration selected".into()));
    };
    write(&out.join(BEST_CONFIG), &format!("{}\n", best.canonical_json()))?;
    if args.evaluate {
        let report = orchestrator::run_evaluation(
            best,
            &p.env,
            &p.target,
            p.rho,
            p.config.evaluation_size(),
            &p.config.eval_seeds(),
        )
        .map_err(orchestrator_err)?;
        write(&out.join(EVAL_REPORT), &pretty(&report))?;
    }
    Ok(run)
}

fn pretty<T: Serialize>(v: &T) -> String {
    format!("{}\n", serde_json::to_string_pretty(v).expect("serializable"))
}

fn load_params(path: &Path, spec: &ParameterSpec) -> Result<ParamConfig, CliError> {
    let config = ParamConfig::from_json(&read(path)?).map_err(config_err)?;
    let violations = paramspace::validate(spec, &config);
    if !violations.is_empty() {
        let detail: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(CliError::Config(format!("{}: {}", path.display(), detail.join("; "))));
    }
    Ok(config)
}

#[derive(Args, Clone, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: Seed,
}

fn dataset_seed(seed: Seed) -> Seed {
    seed::derive(seed, "dataset", 0)
}

/// Writes `n` problems as JSON lines.
pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let config = RunConfig::load(&args.config)?;
    let env = config.environment()?;
    let params = load_params(&args.params, &env.spec)?;
    let data = env.generate(&params, args.n, dataset_seed(args.seed)).map_err(config_err)?;
    let mut text = data.to_jsonl();
    if !text.is_empty() {
        text.push('\n');
    }
    write(&args.out, &text)
}

#[derive(Args, Clone, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Configuration the problems were generated from.
    #[arg(long)]
    pub params: PathBuf,
    /// Problems to score; generated from `params` when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Problems to generate when no dataset is given (default: eval_size).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// `--seed` here picks the dataset and rollout seeds.
    #[command(flatten)]
    pub overrides: Overrides,
}

fn read_dataset(path: &Path, env: &Environment, params: &ParamConfig) -> Result<Dataset, CliError> {
    let problems = read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str::<Problem>(l).map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), k + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        env: env.kind,
        config: params.clone(),
        problems,
    })
}

/// Scores a dataset with the configured target and writes the rollout.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<RolloutResult, CliError> {
    let mut config = RunConfig::load(&args.config)?;
    config.apply(&args.overrides);
    let env = config.environment()?;
    let params = load_params(&args.params, &env.spec)?;
    let data = match &args.dataset {
        Some(path) => read_dataset(path, &env, &params)?,
        None => env
            .generate(&params, args.n.unwrap_or(config.evaluation_size()), dataset_seed(config.seed))
            .map_err(config_err)?,
    };
    let gateway = config.gateway()?;
    let target = Target::new(config.target.clone(), &env, gateway).map_err(config_err)?;
    let result = target
        .evaluate(&data, seed::derive(config.seed, "rollout", 0))
        .map_err(|e| match e {
            difftune_core::targets::TargetError::EmptyDataset => config_err(e),
            other => backend_err(other),
        })?;
    write(&args.out, &pretty(&result))?;
    Ok(result)
}

#[derive(Args, Clone, Debug)]
pub struct ReportArgs {
    /// Evaluation reports, rollout results, or run logs (`.jsonl`).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Target accuracy for inputs that do not record one (rollout results).
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// What a report input contributes: a target accuracy and per-seed accuracies.
fn report_input(path: &Path, rho_flag: Option<f64>) -> Result<(f64, Vec<f64>), CliError> {
    let text = read(path)?;
    let bad = |what: &str| CliError::Config(format!("{}: {what}", path.display()));
    if path.extension().is_some_and(|e| e == "jsonl") {
        let run = orchestrator::read_log(path).map_err(config_err)?;
        let best = run.best_index.ok_or_else(|| bad("run has no measured iteration"))?;
        let h = run.history.iter().find(|h| h.i == best).expect("best index is in the history");
        return Ok((run.setup.rho, vec![h.rho_hat]));
    }
    if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
        return Ok((r.rho, r.rho_hats));
    }
    if let Ok(r) = serde_json::from_str::<RolloutResult>(&text) {
        let rho = rho_flag.ok_or_else(|| bad("rollout results need --rho"))?;
        return Ok((rho, vec![r.rho_hat]));
    }
    Err(bad("not an evaluation report, rollout result, or run log"))
}

/// Folds inputs into one row per target accuracy, ascending.
pub fn cmd_report(args: &ReportArgs) -> Result<Vec<ReportRow>, CliError> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for path in &args.inputs {
        let (rho, hats) = report_input(path, args.rho)?;
        // ρ ∈ (0, 1) so the bit pattern orders like the value
        groups.entry(rho.to_bits()).or_insert((rho, Vec::new())).1.extend(hats);
    }
    let rows = groups
        .values()
        .map(|(rho, hats)| ReportRow::from_seeds(metrics::level_name(*rho).unwrap_or("custom"), *rho, hats))
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_err)?;
    for r in rows.iter().filter(|r| r.ci_half_width.is_none()) {
        eprintln!("warning: {} (rho={}) has {} seed; no confidence interval", r.level, r.rho, r.n_seeds);
    }
    write(&args.out, &metrics::to_csv(&rows))?;
    if let Some(j) = &args.json {
        write(j, &pretty(&rows))?;
    }
    Ok(rows)
}
