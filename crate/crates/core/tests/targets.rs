use std::sync::{Arc, Mutex};

use difftune_core::env::arith::{self, ArithOperator, ArithProblem, Num};
use difftune_core::env::{Dataset, Environment, Problem};
use difftune_core::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError, Role};
use difftune_core::paramspace;
use difftune_core::targets::*;
use proptest::prelude::*;

struct Script(Mutex<Vec<String>>, Mutex<Vec<ChatRequest>>);

impl Script {
    fn new(replies: &[&str]) -> Self {
        Script(Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()), Mutex::new(vec![]))
    }
}

impl ChatBackend for Script {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.1.lock().unwrap().push(request.clone());
        let mut r = self.0.lock().unwrap();
        let next = if r.len() > 1 { r.pop().unwrap() } else { r[0].clone() };
        Ok(ChatResponse::text(next))
    }
}

fn problem(x: i64, y: i64) -> Problem {
    let mut p = ArithProblem { x: Num::int(x), y: Num::int(y), ground_truth: vec![ArithOperator::Add, ArithOperator::Mul], prompt: String::new() };
    p.prompt = arith::render_prompt(&p);
    Problem::Arithmetic(p)
}

fn llm_cfg(horizon: usize) -> LlmTarget {
    LlmTarget { model: "t".into(), temperature: 0.0, max_output_tokens: 256, max_reasoning_tokens: 0, horizon }
}

#[test]
fn tool_loop_echoes_results() {
    let script = Script::new(&["CALL add 3", "CALL mul 6", "FINAL add, mul"]);
    let out = llm_answer(&problem(3, 36), &script, &llm_cfg(16)).unwrap();
    assert_eq!(out.turns, 3);
    assert!(!out.horizon_exceeded);
    assert!(problem(3, 36).check_response(&out.raw));
    let seen = script.1.lock().unwrap();
    let last = &seen[2].messages;
    assert_eq!(last.len(), 5);
    assert_eq!(last[2].role, Role::User);
    assert_eq!(last[2].content, "6");
    assert_eq!(last[4].content, "36");
}

#[test]
fn horizon_is_enforced() {
    let script = Script::new(&["CALL add 3"]);
    let out = llm_answer(&problem(3, 36), &script, &llm_cfg(4)).unwrap();
    assert!(out.horizon_exceeded);
    assert_eq!(out.turns, 4);
    assert_eq!(script.1.lock().unwrap().len(), 4);
}

#[test]
fn llm_target_scores_items() {
    let env = Environment::arithmetic();
    let backend: Arc<dyn ChatBackend> = Arc::new(Script::new(&["FINAL add, mul"]));
    let spec = TargetSpec { workers: 1, ..TargetSpec::new(Backend::Llm(llm_cfg(16))) };
    let t = Target::new(spec, &env, Some(backend)).unwrap();
    let data = Dataset { env: env.kind, config: paramspace::ParamConfig::new(), problems: vec![problem(3, 36), problem(2, 15)] };
    let r = t.evaluate(&data, 0).unwrap();
    assert_eq!(r.per_item.iter().map(|i| i.correct).collect::<Vec<_>>(), vec![true, false]);
    assert_eq!(r.rho_hat, 0.5);
    assert_eq!(r.per_item[0].turns, Some(1));
}

fn dataset(n: usize, seed: u64) -> (Environment, Dataset) {
    let env = Environment::spatial();
    let config = paramspace::sample_uniform(&env.spec, seed);
    let d = env.generate(&config, n, seed).unwrap();
    (env, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn results_follow_their_items(seed in any::<u64>(), eps in 0.0f64..1.0, workers in 1usize..6) {
        let (env, d) = dataset(30, seed);
        let base = Target::new(TargetSpec::oracle(eps), &env, None).unwrap();
        let par = Target::new(TargetSpec { workers, ..TargetSpec::oracle(eps) }, &env, None).unwrap();
        let a = base.evaluate(&d, 7).unwrap();
        prop_assert_eq!(&par.evaluate(&d, 7).unwrap(), &a);
        let mut rev = d.clone();
        rev.problems.reverse();
        let b = base.evaluate(&rev, 7).unwrap();
        let fwd: Vec<bool> = a.per_item.iter().map(|i| i.correct).collect();
        let mut back: Vec<bool> = b.per_item.iter().map(|i| i.correct).collect();
        back.reverse();
        prop_assert_eq!(fwd, back);
        prop_assert_eq!(a.rho_hat, b.rho_hat);
    }
}

#[test]
fn empty_dataset_is_an_error() {
    let (env, mut d) = dataset(1, 0);
    d.problems.clear();
    let t = Target::new(TargetSpec::oracle(0.0), &env, None).unwrap();
    assert!(matches!(t.evaluate(&d, 0), Err(TargetError::EmptyDataset)));
}

#[test]
fn rollout_json_shape() {
    let (env, d) = dataset(3, 1);
    let t = Target::new(TargetSpec::oracle(0.0), &env, None).unwrap();
    let v: serde_json::Value = serde_json::to_value(t.evaluate(&d, 0).unwrap()).unwrap();
    assert_eq!(v["rho_hat"], 1.0);
    assert_eq!(v["n"], 3);
    assert_eq!(v["per_item"].as_array().unwrap().len(), 3);
}
