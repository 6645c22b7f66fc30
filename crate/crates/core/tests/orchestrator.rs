use std::path::Path;
use std::sync::Arc;

use difftune_core::designers::{self, Designer, DesignerDeps, DesignerError, DesignerSpec, ProposeCtx};
use difftune_core::env::Environment;
use difftune_core::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError};
use difftune_core::orchestrator::*;
use difftune_core::paramspace::{ParamConfig, ParamDomain, ParameterSpec};
use difftune_core::targets::{Backend, LlmTarget, Target, TargetSpec};
use proptest::prelude::*;

fn knob_env() -> Environment {
    Environment::synthetic(ParameterSpec::new("knob").param("level", ParamDomain::int_range(0, 100).with_default(0)))
}

fn setup(designer: DesignerSpec, iterations: usize, seed: u64) -> SearchSetup {
    SearchSetup {
        spec: knob_env().spec,
        designer,
        target: TargetSpec::logistic(vec![1.0], 10.0, 5.0),
        rho: 0.5,
        iterations,
        n_s: 50,
        seed,
    }
}

fn run_to(path: &Path, s: SearchSetup) -> SearchRun {
    let env = knob_env();
    let target = Arc::new(Target::new(s.target.clone(), &env, None).unwrap());
    let deps = DesignerDeps { env: env.clone(), target: Some(target.clone()), gateway: None };
    let mut d = designers::build(&s.designer, deps).unwrap();
    let mut log = RunLog::create(path).unwrap();
    run_search(s, &env, &target, d.as_mut(), &mut log, SearchOptions::default()).unwrap()
}

fn resume_from(path: &Path) -> SearchRun {
    let env = knob_env();
    let partial = read_log(path).unwrap();
    let target = Arc::new(Target::new(partial.setup.target.clone(), &env, None).unwrap());
    let deps = DesignerDeps { env: env.clone(), target: Some(target.clone()), gateway: None };
    let mut d = designers::build(&partial.setup.designer, deps).unwrap();
    resume(path, &env, &target, d.as_mut(), SearchOptions::default()).unwrap()
}

#[test]
fn single_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_to(&dir.path().join("log.jsonl"), setup(DesignerSpec::Random, 1, 0));
    assert_eq!(run.history.len(), 1);
    assert_eq!(run.best_index, Some(1));
    let text = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn identical_inputs_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    for designer in [
        DesignerSpec::Random,
        DesignerSpec::rs_ppr(),
        DesignerSpec::ScriptedBisection { knob: "level".into(), higher_is_harder: true },
    ] {
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        run_to(&a, setup(designer.clone(), 8, 42));
        run_to(&b, setup(designer, 8, 42));
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    for designer in [DesignerSpec::rs_ppr(), DesignerSpec::ScriptedBisection { knob: "level".into(), higher_is_harder: true }] {
        let full = dir.path().join("full.jsonl");
        let cut = dir.path().join("cut.jsonl");
        run_to(&full, setup(designer.clone(), 10, 5));
        // keep the header and the first three iterations
        let text = std::fs::read_to_string(&full).unwrap();
        let head: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        std::fs::write(&cut, head).unwrap();
        let partial = read_log(&cut).unwrap();
        assert_eq!(partial.next_index(), 4);
        let run = resume_from(&cut);
        assert_eq!(run.history.len(), 10);
        assert_eq!(std::fs::read_to_string(&cut).unwrap(), text);
    }
}

#[test]
fn resuming_a_finished_run_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    let run = run_to(&p, setup(DesignerSpec::Random, 3, 1));
    let before = std::fs::read(&p).unwrap();
    assert_eq!(resume_from(&p), run);
    assert_eq!(std::fs::read(&p).unwrap(), before);
}

#[test]
fn damaged_logs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    run_to(&p, setup(DesignerSpec::Random, 3, 1));
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let cases = [
        // cut mid-record
        text[..text.len() - 20].to_string(),
        // no header
        format!("{}\n", lines[1]),
        // an iteration out of order
        format!("{}\n{}\n", lines[0], lines[2]),
        // garbage line
        format!("{}\nnot json\n", lines[0]),
    ];
    for bad in cases {
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_log(&p), Err(OrchestratorError::CorruptLog { .. })), "{bad}");
    }
}

struct Flaky {
    fail_first: usize,
    calls: usize,
}

impl Designer for Flaky {
    fn name(&self) -> &'static str {
        "flaky"
    }

    fn propose(&mut self, ctx: &ProposeCtx<'_>) -> Result<ParamConfig, DesignerError> {
        self.calls += 1;
        if self.calls <= self.fail_first {
            return Err(DesignerError::Config("transient".into()));
        }
        Ok(ParamConfig::new().with("level", (10 * ctx.history.len()) as i64))
    }
}

#[test]
fn designer_errors_retry_once_then_skip() {
    let env = knob_env();
    let s = setup(DesignerSpec::Random, 3, 0);
    let target = Target::new(s.target.clone(), &env, None).unwrap();
    // one failure: absorbed by the retry
    let mut d = Flaky { fail_first: 1, calls: 0 };
    let run = run_search(s.clone(), &env, &target, &mut d, &mut RunLog::disabled(), SearchOptions::default()).unwrap();
    assert_eq!((run.history.len(), run.skipped.len()), (3, 0));
    // two failures: first iteration skipped, the rest proceed
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    let mut d = Flaky { fail_first: 2, calls: 0 };
    let run = run_search(s, &env, &target, &mut d, &mut RunLog::create(&p).unwrap(), SearchOptions::default()).unwrap();
    assert_eq!(run.skipped, vec![1]);
    assert_eq!(run.history.iter().map(|h| h.i).collect::<Vec<_>>(), vec![2, 3]);
    assert!(std::fs::read_to_string(&p).unwrap().contains("\"record\":\"skipped\""));
    assert_eq!(read_log(&p).unwrap(), run);
}

struct Down;

impl ChatBackend for Down {
    fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        Err(GatewayError::Transport("connection refused".into()))
    }
}

#[test]
fn backend_failure_aborts_with_partial_log() {
    let env = Environment::arithmetic();
    let spec = TargetSpec::new(Backend::Llm(LlmTarget {
        model: "m".into(),
        temperature: 0.0,
        max_output_tokens: 64,
        max_reasoning_tokens: 0,
        horizon: 4,
    }));
    let target = Target::new(spec.clone(), &env, Some(Arc::new(Down))).unwrap();
    let s = SearchSetup { spec: env.spec.clone(), target: spec, n_s: 2, ..setup(DesignerSpec::Random, 3, 0) };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    let mut d = designers::RandomDesigner;
    let err = run_search(s, &env, &target, &mut d, &mut RunLog::create(&p).unwrap(), SearchOptions::default()).unwrap_err();
    assert!(matches!(err, OrchestratorError::Backend { i: 1, .. }));
    let partial = read_log(&p).unwrap();
    assert_eq!(partial.next_index(), 1);
}

#[test]
fn perfect_oracle_evaluation() {
    let env = Environment::arithmetic();
    let target = Target::new(TargetSpec::oracle(0.0), &env, None).unwrap();
    let config = difftune_core::paramspace::sample_uniform(&env.spec, 3);
    let r = run_evaluation(&config, &env, &target, 0.25, 20, &[9]).unwrap();
    assert_eq!(r.rho_hats, vec![1.0]);
    assert!((r.mean_gap - 0.75).abs() < 1e-12);
    assert_eq!(r.ci_half_width, None);
    assert!(run_evaluation(&config, &env, &target, 0.25, 0, &[9]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn best_gap_never_increases_with_prefix(gaps in prop::collection::vec(0.0f64..1.0, 1..30)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let s = setup(DesignerSpec::Random, gaps.len(), 0);
        let mut lines = vec![serde_json::to_string(&LogRecord::Header { setup: s, started_at: None }).unwrap()];
        let mut prev = f64::INFINITY;
        for (k, g) in gaps.iter().enumerate() {
            lines.push(serde_json::to_string(&LogRecord::Iteration {
                i: k + 1,
                config: ParamConfig::new().with("level", 1i64),
                rho_hat: 0.5 + g / 2.0,
                gap: *g,
                duration_ms: None,
            }).unwrap());
            std::fs::write(&p, lines.join("\n") + "\n").unwrap();
            let run = read_log(&p).unwrap();
            let best = run.best_gap.unwrap();
            prop_assert!(best <= prev);
            let min = gaps[..=k].iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(best, min);
            let first = gaps.iter().position(|x| *x == min).unwrap() + 1;
            prop_assert_eq!(run.best_index, Some(first));
            prev = best;
        }
    }
}
