//! Arithmetic operator-sequence problems.
//!
//! Every operator is a unary map in which both operands of the underlying
//! binary operation are the input (`add(x) = x + x`, `div(x) = x / x`, ...).
//! A problem hands the solver an input `x` and an output `y`; the answer is
//! any operator sequence that maps `x` to `y`.
//!
//! Integer problems are evaluated with exact big-integer arithmetic (a square
//! root that is not a perfect square drops to floating point). Float problems
//! use `f64` throughout and treat overflow as a domain error.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::paramspace::{CrossConstraint, Label, ParamConfig, ParamDomain, ParameterSpec, Term};
use crate::seed::{self, Seed};

/// Longest predicted sequence accepted at verification (the agent horizon).
pub const MAX_ANSWER_LEN: usize = 16;
pub const GENERATION_ATTEMPTS: usize = 100;
/// Relative tolerance used when comparing a predicted result to `y`.
pub const REL_TOLERANCE: f64 = 1e-9;

const TEMPLATE: &str = include_str!("../../templates/arith_question.txt");

/// Declared in alphabetical order so the derived `Ord` is lexicographic by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithOperator {
    Add,
    Div,
    Mul,
    Pow,
    Sqrt,
    Sub,
}

impl ArithOperator {
    /// The six operators in the order they are presented to models.
    pub const ALL: [ArithOperator; 6] = [
        ArithOperator::Add,
        ArithOperator::Sub,
        ArithOperator::Mul,
        ArithOperator::Div,
        ArithOperator::Sqrt,
        ArithOperator::Pow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArithOperator::Add => "add",
            ArithOperator::Sub => "sub",
            ArithOperator::Mul => "mul",
            ArithOperator::Div => "div",
            ArithOperator::Sqrt => "sqrt",
            ArithOperator::Pow => "pow",
        }
    }

    fn describe(self) -> &'static str {
        match self {
            ArithOperator::Add => "add(x) returns x + x",
            ArithOperator::Sub => "sub(x) returns x - x",
            ArithOperator::Mul => "mul(x) returns x * x",
            ArithOperator::Div => "div(x) returns x / x",
            ArithOperator::Sqrt => "sqrt(x) returns the square root of x",
            ArithOperator::Pow => "pow(x) returns x to the power of two",
        }
    }
}

impl fmt::Display for ArithOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArithOperator {
    type Err = ArithError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let cleaned: String = s.chars().filter(|c| c.is_ascii_alphabetic()).collect();
        ArithOperator::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(&cleaned))
            .ok_or_else(|| ArithError::UnknownOperator(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainFault {
    SqrtOfNegative,
    DivisionByZero,
    Overflow,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArithError {
    #[error("{op} is undefined here ({fault:?}){}", .index.map(|i| format!(" at position {i}")).unwrap_or_default())]
    Domain {
        op: ArithOperator,
        fault: DomainFault,
        index: Option<usize>,
    },
    #[error("no valid input found after {0} attempts")]
    GenerationExhausted(usize),
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("invalid arithmetic parameters: {0}")]
    InvalidParams(String),
}

/// A value on the evaluation path.
#[derive(Clone, Debug, PartialEq)]
pub enum Num {
    Int(BigInt),
    Float(f64),
}

impl Num {
    pub fn int(i: i64) -> Self {
        Num::Int(BigInt::from(i))
    }

    /// Lossy conversion; integers beyond `f64` range become infinite.
    pub fn to_f64(&self) -> f64 {
        match self {
            Num::Int(i) => i.to_f64().unwrap_or(if i.is_negative() { f64::NEG_INFINITY } else { f64::INFINITY }),
            Num::Float(f) => *f,
        }
    }

    pub fn is_integral(&self) -> bool {
        match self {
            Num::Int(_) => true,
            Num::Float(f) => f.fract() == 0.0,
        }
    }

    /// Parses a decimal integer exactly, anything else as `f64`.
    pub fn parse(text: &str) -> Option<Num> {
        let t = text.trim();
        if let Ok(i) = t.parse::<BigInt>() {
            return Some(Num::Int(i));
        }
        t.parse::<f64>().ok().filter(|f| f.is_finite()).map(Num::Float)
    }

    /// `|self - y| <= REL_TOLERANCE * max(1, |y|)`.
    pub fn approx_eq(&self, y: &Num) -> bool {
        match (self, y) {
            (Num::Int(a), Num::Int(b)) => {
                let scale = BigInt::from(1_000_000_000u64);
                let bound = if b.abs() > BigInt::one() { b.abs() } else { BigInt::one() };
                (a - b).abs() * scale <= bound
            }
            _ => {
                let (a, b) = (self.to_f64(), y.to_f64());
                a.is_finite() && b.is_finite() && (a - b).abs() <= REL_TOLERANCE * b.abs().max(1.0)
            }
        }
    }
}

impl fmt::Display for Num {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Num::Int(i) => write!(f, "{i}"),
            // Debug keeps a trailing `.0` and prints the shortest round-trip digits.
            Num::Float(x) => write!(f, "{x:?}"),
        }
    }
}

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Num::Int(i) => s.serialize_str(&i.to_string()),
            Num::Float(f) => s.serialize_f64(*f),
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(t) => t
                .parse::<BigInt>()
                .map(Num::Int)
                .map_err(|e| serde::de::Error::custom(format!("bad integer `{t}`: {e}"))),
            Raw::Number(f) => Ok(Num::Float(f)),
        }
    }
}

fn bigint_sqrt_f64(x: &BigInt) -> f64 {
    if x.bits() < 1000 {
        x.to_f64().unwrap_or(f64::INFINITY).sqrt()
    } else {
        x.sqrt().to_f64().unwrap_or(f64::INFINITY)
    }
}

pub fn apply_op(op: ArithOperator, x: &Num) -> Result<Num, ArithError> {
    let fault = |fault| ArithError::Domain { op, fault, index: None };
    match x {
        Num::Int(v) => Ok(match op {
            ArithOperator::Add => Num::Int(v + v),
            ArithOperator::Sub => Num::Int(BigInt::zero()),
            ArithOperator::Mul | ArithOperator::Pow => Num::Int(v * v),
            ArithOperator::Div => {
                if v.is_zero() {
                    return Err(fault(DomainFault::DivisionByZero));
                }
                Num::Int(BigInt::one())
            }
            ArithOperator::Sqrt => {
                if v.is_negative() {
                    return Err(fault(DomainFault::SqrtOfNegative));
                }
                let r = v.sqrt();
                if &(&r * &r) == v {
                    Num::Int(r)
                } else {
                    let f = bigint_sqrt_f64(v);
                    if !f.is_finite() {
                        return Err(fault(DomainFault::Overflow));
                    }
                    Num::Float(f)
                }
            }
        }),
        Num::Float(v) => {
            let v = *v;
            let out = match op {
                ArithOperator::Add => v + v,
                ArithOperator::Sub => v - v,
                ArithOperator::Mul | ArithOperator::Pow => v * v,
                ArithOperator::Div => {
                    if v == 0.0 {
                        return Err(fault(DomainFault::DivisionByZero));
                    }
                    v / v
                }
                ArithOperator::Sqrt => {
                    if v < 0.0 {
                        return Err(fault(DomainFault::SqrtOfNegative));
                    }
                    v.sqrt()
                }
            };
            if !out.is_finite() {
                return Err(fault(DomainFault::Overflow));
            }
            Ok(Num::Float(out))
        }
    }
}

/// Left fold of [`apply_op`]; errors carry the failing position.
pub fn eval_sequence(seq: &[ArithOperator], x: &Num) -> Result<Num, ArithError> {
    let mut acc = x.clone();
    for (i, op) in seq.iter().enumerate() {
        acc = apply_op(*op, &acc).map_err(|e| match e {
            ArithError::Domain { op, fault, .. } => ArithError::Domain { op, fault, index: Some(i) },
            other => other,
        })?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumType {
    Int,
    Float,
}

/// A fully specified arithmetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArithParams {
    pub max_range_of_nums: i64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub type_of_nums: NumType,
    pub operator_sequence: Vec<ArithOperator>,
}

/// The arithmetic design space: input range, sequence length `N`, per-operator
/// repeat cap `K`, number type, and the three operators the sequence draws
/// from. `3·K >= N` keeps a length-`N` sequence realizable.
pub fn parameter_spec() -> ParameterSpec {
    ParameterSpec::new("arithmetic-sequence")
        .param("max_range_of_nums", ParamDomain::int_range(5, 50).with_default(10))
        .param("N", ParamDomain::int_range(5, 10).with_default(5))
        .param("K", ParamDomain::int_range(1, 5).with_default(2))
        .param("type_of_nums", ParamDomain::choice(["int", "float"]).with_default("int"))
        .param(
            "operators",
            ParamDomain::subset(ArithOperator::ALL.map(|o| o.name()), 3, 3)
                .with_default(vec![Label::from("add"), Label::from("mul"), Label::from("sqrt")]),
        )
        .constraint(CrossConstraint::Feasibility {
            greater: vec![Term::new(3, "K")],
            lesser: vec![Term::new(1, "N")],
            adjust: "K".into(),
        })
}

/// Draws a length-`n` sequence over `ops` in which no operator appears more
/// than `k` times; each position is uniform over operators with capacity left.
pub fn realize_sequence(ops: &[ArithOperator], n: usize, k: usize, seed: Seed) -> Result<Vec<ArithOperator>, ArithError> {
    if ops.is_empty() || ops.len() * k < n {
        return Err(ArithError::InvalidParams(format!(
            "{} operators repeated at most {k} times cannot fill {n} slots",
            ops.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let mut counts = vec![0usize; ops.len()];
    let mut seq = Vec::with_capacity(n);
    for _ in 0..n {
        let open: Vec<usize> = (0..ops.len()).filter(|&i| counts[i] < k).collect();
        let pick = open[rng.random_range(0..open.len())];
        counts[pick] += 1;
        seq.push(ops[pick]);
    }
    Ok(seq)
}

impl ArithParams {
    /// Builds generator parameters from an in-domain config. The operator
    /// sequence is realized from a seed tied to the config's canonical JSON,
    /// so a config always yields the same sequence.
    pub fn from_config(config: &ParamConfig) -> Result<Self, ArithError> {
        let missing = |p: &str| ArithError::InvalidParams(format!("missing or mistyped `{p}`"));
        let max_range_of_nums = config.int("max_range_of_nums").ok_or_else(|| missing("max_range_of_nums"))?;
        let n = config.int("N").ok_or_else(|| missing("N"))? as usize;
        let k = config.int("K").ok_or_else(|| missing("K"))? as usize;
        let type_of_nums = match config.label("type_of_nums") {
            Some(Label::Str(s)) if s == "int" => NumType::Int,
            Some(Label::Str(s)) if s == "float" => NumType::Float,
            _ => return Err(missing("type_of_nums")),
        };
        let ops = config
            .list("operators")
            .ok_or_else(|| missing("operators"))?
            .iter()
            .map(|l| l.to_string().parse())
            .collect::<Result<Vec<ArithOperator>, _>>()?;
        let seq_seed = seed::of_bytes(config.canonical_json().as_bytes());
        let operator_sequence = realize_sequence(&ops, n, k, seq_seed)?;
        let params = ArithParams {
            max_range_of_nums,
            n,
            k,
            type_of_nums,
            operator_sequence,
        };
        params.check()?;
        Ok(params)
    }

    pub fn check(&self) -> Result<(), ArithError> {
        let bad = |m: String| Err(ArithError::InvalidParams(m));
        if self.max_range_of_nums < 3 {
            return bad(format!("max_range_of_nums {} leaves no value in (1, max)", self.max_range_of_nums));
        }
        if self.operator_sequence.len() != self.n {
            return bad(format!("sequence length {} != N = {}", self.operator_sequence.len(), self.n));
        }
        let distinct: HashSet<_> = self.operator_sequence.iter().collect();
        if distinct.len() > 3 {
            return bad(format!("{} distinct operators, at most 3 allowed", distinct.len()));
        }
        for op in distinct {
            let c = self.operator_sequence.iter().filter(|o| *o == op).count();
            if c > self.k {
                return bad(format!("{op} used {c} times, K = {}", self.k));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArithProblem {
    pub x: Num,
    pub y: Num,
    pub ground_truth: Vec<ArithOperator>,
    pub prompt: String,
}

fn draw_input(rng: &mut impl Rng, max: i64, ty: NumType) -> Num {
    match ty {
        NumType::Int => Num::int(rng.random_range(2..max)),
        NumType::Float => loop {
            let u: f64 = rng.random();
            let x = 1.0 + (max as f64 - 1.0) * u;
            if x > 1.0 && x < max as f64 {
                break Num::Float(x);
            }
        },
    }
}

/// Draws `x` uniformly from the open interval `(1, max_range_of_nums)` and
/// runs the sequence, redrawing when an intermediate value is undefined.
pub fn generate_problem(params: &ArithParams, seed: Seed) -> Result<ArithProblem, ArithError> {
    params.check()?;
    let mut rng = seed::rng(seed);
    for _ in 0..GENERATION_ATTEMPTS {
        let x = draw_input(&mut rng, params.max_range_of_nums, params.type_of_nums);
        if let Ok(y) = eval_sequence(&params.operator_sequence, &x) {
            let mut problem = ArithProblem {
                x,
                y,
                ground_truth: params.operator_sequence.clone(),
                prompt: String::new(),
            };
            problem.prompt = render_prompt(&problem);
            return Ok(problem);
        }
    }
    Err(ArithError::GenerationExhausted(GENERATION_ATTEMPTS))
}

pub fn verify(problem: &ArithProblem, predicted: &[ArithOperator]) -> bool {
    predicted.len() <= MAX_ANSWER_LEN
        && eval_sequence(predicted, &problem.x).is_ok_and(|v| v.approx_eq(&problem.y))
}

/// Every sequence of length `1..=max_len` over `allowed` that verifies, in
/// lexicographic order (a prefix sorts before its extensions), truncated to
/// `cap` entries.
pub fn enumerate_solutions(
    problem: &ArithProblem,
    allowed: &[ArithOperator],
    max_len: usize,
    cap: usize,
) -> Vec<Vec<ArithOperator>> {
    let mut ops: Vec<ArithOperator> = allowed.to_vec();
    ops.sort();
    ops.dedup();
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(max_len);
    fn walk(
        value: &Num,
        ops: &[ArithOperator],
        max_len: usize,
        cap: usize,
        y: &Num,
        path: &mut Vec<ArithOperator>,
        out: &mut Vec<Vec<ArithOperator>>,
    ) {
        for &op in ops {
            if out.len() >= cap {
                return;
            }
            let Ok(next) = apply_op(op, value) else { continue };
            path.push(op);
            if next.approx_eq(y) {
                out.push(path.clone());
            }
            if path.len() < max_len {
                walk(&next, ops, max_len, cap, y, path, out);
            }
            path.pop();
        }
    }
    if max_len > 0 && cap > 0 {
        walk(&problem.x, &ops, max_len, cap, &problem.y, &mut path, &mut out);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum ValueKey {
    Int(BigInt),
    Float(u64),
}

impl From<&Num> for ValueKey {
    fn from(n: &Num) -> Self {
        match n {
            Num::Int(i) => ValueKey::Int(i.clone()),
            Num::Float(f) => ValueKey::Float(f.to_bits()),
        }
    }
}

/// Outcome of a bounded shortest-solution search.
#[derive(Clone, Debug, PartialEq)]
pub enum Search {
    Found(Vec<ArithOperator>),
    /// The whole reachable space up to `max_len` was explored.
    Exhausted,
    /// The node budget ran out first.
    CapReached,
}

/// Breadth-first search over distinct intermediate values. Returns the
/// lexicographically smallest among the shortest verifying sequences.
pub fn shortest_solution(problem: &ArithProblem, allowed: &[ArithOperator], max_len: usize, node_cap: usize) -> Search {
    let mut ops: Vec<ArithOperator> = allowed.to_vec();
    ops.sort();
    ops.dedup();
    let mut seen: HashSet<ValueKey> = HashSet::new();
    seen.insert(ValueKey::from(&problem.x));
    let mut layer: Vec<(Num, Vec<ArithOperator>)> = vec![(problem.x.clone(), Vec::new())];
    for _ in 0..max_len {
        let mut next_layer = Vec::new();
        for (value, path) in &layer {
            for &op in &ops {
                let Ok(next) = apply_op(op, value) else { continue };
                let mut p = path.clone();
                p.push(op);
                if next.approx_eq(&problem.y) {
                    return Search::Found(p);
                }
                if seen.insert(ValueKey::from(&next)) {
                    if seen.len() > node_cap {
                        return Search::CapReached;
                    }
                    next_layer.push((next, p));
                }
            }
        }
        if next_layer.is_empty() {
            break;
        }
        layer = next_layer;
    }
    Search::Exhausted
}

pub fn render_prompt(problem: &ArithProblem) -> String {
    let tools = ArithOperator::ALL
        .iter()
        .map(|op| format!("- {}: {}", op.name(), op.describe()))
        .collect::<Vec<_>>()
        .join("\n");
    TEMPLATE
        .replace("{tools}", &tools)
        .replace("{x}", &problem.x.to_string())
        .replace("{y}", &problem.y.to_string())
}

pub fn format_final(seq: &[ArithOperator]) -> String {
    let names: Vec<&str> = seq.iter().map(|o| o.name()).collect();
    format!("FINAL {}", names.join(", "))
}

/// Parses the last `FINAL ...` line of a response. `None` when there is no
/// such line or it names an unknown operator.
pub fn parse_final(text: &str) -> Option<Vec<ArithOperator>> {
    let line = text.lines().rev().map(str::trim).find(|l| l.starts_with("FINAL"))?;
    let body = line["FINAL".len()..].trim_start_matches(':');
    body.split(|c: char| c == ',' || c.is_whitespace())
        .map(|t| t.trim_matches(|c: char| !c.is_ascii_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().ok())
        .collect()
}

/// Scores a raw model response against the problem.
pub fn score_response(problem: &ArithProblem, response: &str) -> bool {
    parse_final(response).is_some_and(|seq| verify(problem, &seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ArithOperator::*;

    fn problem(x: i64, y: i64) -> ArithProblem {
        let mut p = ArithProblem {
            x: Num::int(x),
            y: Num::int(y),
            ground_truth: vec![],
            prompt: String::new(),
        };
        p.prompt = render_prompt(&p);
        p
    }

    #[test]
    fn unary_semantics() {
        assert_eq!(apply_op(Add, &Num::int(3)).unwrap(), Num::int(6));
        assert_eq!(apply_op(Sub, &Num::int(7)).unwrap(), Num::int(0));
        assert_eq!(apply_op(Pow, &Num::int(4)).unwrap(), Num::int(16));
        assert_eq!(apply_op(Div, &Num::Float(2.5)).unwrap(), Num::Float(1.0));
        assert_eq!(apply_op(Sqrt, &Num::int(10)).unwrap(), Num::Float(10f64.sqrt()));
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(
            apply_op(Div, &Num::int(0)),
            Err(ArithError::Domain { fault: DomainFault::DivisionByZero, .. })
        ));
        assert!(matches!(
            apply_op(Sqrt, &Num::Float(-1.0)),
            Err(ArithError::Domain { fault: DomainFault::SqrtOfNegative, .. })
        ));
        assert!(matches!(
            eval_sequence(&[Sub, Div], &Num::int(5)),
            Err(ArithError::Domain { index: Some(1), .. })
        ));
        assert!(matches!(
            eval_sequence(&[Pow; 12], &Num::Float(40.0)),
            Err(ArithError::Domain { fault: DomainFault::Overflow, .. })
        ));
    }

    #[test]
    fn sequences_fold_left() {
        assert_eq!(eval_sequence(&[Pow, Sqrt], &Num::int(4)).unwrap(), Num::int(4));
        assert_eq!(eval_sequence(&[Add, Mul], &Num::int(3)).unwrap(), Num::int(36));
    }

    #[test]
    fn eight_squarings_stay_exact() {
        let seq = [Pow, Mul, Pow, Mul, Pow, Mul, Pow, Mul];
        let y = eval_sequence(&seq, &Num::int(40)).unwrap();
        let Num::Int(v) = &y else { panic!("expected exact integer") };
        assert_eq!(v.to_string().len(), 411);
        assert_eq!(*v, BigInt::from(40).pow(256));
    }

    #[test]
    fn verify_examples() {
        let p = problem(3, 36);
        assert!(verify(&p, &[Add, Mul]));
        assert!(!verify(&p, &[Mul, Add]));
        assert!(!verify(&p, &[Add; 17]));
    }

    #[test]
    fn enumeration_examples() {
        assert_eq!(enumerate_solutions(&problem(3, 36), &[Add, Mul], 2, 100), vec![vec![Add, Mul]]);
        assert_eq!(enumerate_solutions(&problem(5, 0), &[Sub], 1, 100), vec![vec![Sub]]);
        // min length is 1 even when y == x
        assert!(enumerate_solutions(&problem(4, 4), &[Add], 1, 100).is_empty());
        assert_eq!(enumerate_solutions(&problem(3, 36), &ArithOperator::ALL, 3, 2).len(), 2);
    }

    #[test]
    fn lexicographic_enumeration_order() {
        let sols = enumerate_solutions(&problem(2, 16), &ArithOperator::ALL, 2, 100);
        let mut sorted = sols.clone();
        sorted.sort();
        assert_eq!(sols, sorted);
        assert_eq!(sols[0], vec![Add, Mul]);
    }

    #[test]
    fn shortest_prefers_length_then_lex() {
        assert_eq!(shortest_solution(&problem(3, 36), &ArithOperator::ALL, 4, 10_000), Search::Found(vec![Add, Mul]));
        assert_eq!(shortest_solution(&problem(2, 4), &ArithOperator::ALL, 4, 10_000), Search::Found(vec![Add]));
        // y == x needs a round trip
        assert_eq!(shortest_solution(&problem(4, 4), &ArithOperator::ALL, 4, 10_000), Search::Found(vec![Mul, Sqrt]));
        assert_eq!(shortest_solution(&problem(3, 7), &[Add], 3, 10_000), Search::Exhausted);
    }

    #[test]
    fn final_line_parsing() {
        assert_eq!(parse_final("thinking...\nFINAL add, mul"), Some(vec![Add, Mul]));
        assert_eq!(parse_final("FINAL: [\"pow\", \"sqrt\"]"), Some(vec![Pow, Sqrt]));
        assert_eq!(parse_final("FINAL add, bogus"), None);
        assert_eq!(parse_final("no answer"), None);
        assert_eq!(format_final(&[Add, Mul]), "FINAL add, mul");
    }

    #[test]
    fn prompt_carries_numbers_and_protocol() {
        let p = ArithProblem {
            x: Num::Float(2.4460677252452125),
            y: Num::Float(4.423634456186643),
            ground_truth: vec![],
            prompt: String::new(),
        };
        let text = render_prompt(&p);
        assert!(text.contains("Input number: 2.4460677252452125"));
        assert!(text.contains("Final answer: 4.423634456186643"));
        assert!(text.contains("FINAL <sequence of operators as a comma separated list>"));
        assert!(text.contains("- sqrt:"));
        assert_eq!(text, render_prompt(&p));
    }

    #[test]
    fn num_serializes_big_ints_as_strings() {
        let p = problem(3, 36);
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"x\":\"3\""));
        let back: ArithProblem = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let f: Num = serde_json::from_str("2.5").unwrap();
        assert_eq!(f, Num::Float(2.5));
    }

    #[test]
    fn config_realizes_a_fixed_sequence() {
        let spec = parameter_spec();
        let cfg = crate::paramspace::sample_uniform(&spec, 11);
        let a = ArithParams::from_config(&cfg).unwrap();
        let b = ArithParams::from_config(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.operator_sequence.len(), a.n);
        a.check().unwrap();
    }

    #[test]
    fn generation_contracts() {
        let params = ArithParams {
            max_range_of_nums: 20,
            n: 5,
            k: 2,
            type_of_nums: NumType::Int,
            operator_sequence: vec![Sub, Add, Add, Mul, Mul],
        };
        let p = generate_problem(&params, 5).unwrap();
        assert_eq!(p.y, Num::int(0));
        assert!(p.x.is_integral());
        assert_eq!(p, generate_problem(&params, 5).unwrap());
        let bad = ArithParams {
            operator_sequence: vec![Sub, Div, Add, Add, Sub],
            ..params
        };
        assert_eq!(generate_problem(&bad, 1), Err(ArithError::GenerationExhausted(100)));
    }
}
