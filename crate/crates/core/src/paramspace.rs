//! Declarative benchmark design spaces.
//!
//! A [`ParameterSpec`] is an ordered product of finite domains plus a handful
//! of cross-parameter constraints. Configurations are plain maps from
//! parameter name to value; validation reports violations as data and
//! projection maps any configuration with usable values onto the nearest
//! in-domain point using a deterministic rule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::seed::{self, Seed};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("invalid parameter spec: {0}")]
    InvalidSpec(String),
    #[error("cannot project config: parameter `{param}` is missing and has no default")]
    UnprojectableConfig { param: String },
    #[error("constraint on `{param}` cannot be satisfied inside the domain")]
    Infeasible { param: String },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// A choice label. Choice lists may mix integers (`90`) and strings (`"LEFT"`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Int(i64),
    Str(String),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Int(i) => write!(f, "{i}"),
            Label::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label::Str(s.to_string())
    }
}

impl From<i64> for Label {
    fn from(i: i64) -> Self {
        Label::Int(i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Str(String),
    List(Vec<Label>),
}

impl ParamValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            ParamValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_label(&self) -> Option<Label> {
        match self {
            ParamValue::Int(i) => Some(Label::Int(*i)),
            ParamValue::Str(s) => Some(Label::Str(s.clone())),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Label]> {
        match self {
            ParamValue::List(l) => Some(l),
            _ => None,
        }
    }
}

impl From<Label> for ParamValue {
    fn from(l: Label) -> Self {
        match l {
            Label::Int(i) => ParamValue::Int(i),
            Label::Str(s) => ParamValue::Str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainKind {
    IntRange {
        low: i64,
        high: i64,
    },
    Bool,
    Choice {
        choices: Vec<Label>,
    },
    SubsetOfChoices {
        choices: Vec<Label>,
        min_subset_size: usize,
        max_subset_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDomain {
    #[serde(flatten)]
    pub kind: DomainKind,
    /// Used by projection when the parameter is absent or unusable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParamValue>,
}

impl ParamDomain {
    pub fn int_range(low: i64, high: i64) -> Self {
        DomainKind::IntRange { low, high }.into()
    }

    pub fn boolean() -> Self {
        DomainKind::Bool.into()
    }

    pub fn choice<L: Into<Label>>(choices: impl IntoIterator<Item = L>) -> Self {
        DomainKind::Choice {
            choices: choices.into_iter().map(Into::into).collect(),
        }
        .into()
    }

    pub fn subset<L: Into<Label>>(choices: impl IntoIterator<Item = L>, min: usize, max: usize) -> Self {
        DomainKind::SubsetOfChoices {
            choices: choices.into_iter().map(Into::into).collect(),
            min_subset_size: min,
            max_subset_size: max,
        }
        .into()
    }

    pub fn with_default(mut self, value: impl Into<ParamValue>) -> Self {
        self.default = Some(value.into());
        self
    }

    /// Number of feature slots this domain occupies.
    pub fn feature_width(&self) -> usize {
        match &self.kind {
            DomainKind::IntRange { .. } | DomainKind::Bool => 1,
            DomainKind::Choice { choices } | DomainKind::SubsetOfChoices { choices, .. } => choices.len(),
        }
    }
}

impl From<DomainKind> for ParamDomain {
    fn from(kind: DomainKind) -> Self {
        ParamDomain { kind, default: None }
    }
}

impl From<bool> for ParamValue {
    fn from(b: bool) -> Self {
        ParamValue::Bool(b)
    }
}

impl From<i64> for ParamValue {
    fn from(i: i64) -> Self {
        ParamValue::Int(i)
    }
}

impl From<&str> for ParamValue {
    fn from(s: &str) -> Self {
        ParamValue::Str(s.to_string())
    }
}

impl From<Vec<Label>> for ParamValue {
    fn from(l: Vec<Label>) -> Self {
        ParamValue::List(l)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub coef: i64,
    pub param: String,
}

impl Term {
    pub fn new(coef: i64, param: &str) -> Self {
        Term {
            coef,
            param: param.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CrossConstraint {
    /// `flag` true requires the set-valued `target` to be non-empty.
    ImpliesNonempty { flag: String, target: String },
    /// `flag` false requires `target` to be zero (int) or empty (set).
    ImpliesZero { flag: String, target: String },
    /// `sum(greater) >= sum(lesser)`; projection raises `adjust` first.
    Feasibility {
        greater: Vec<Term>,
        lesser: Vec<Term>,
        adjust: String,
    },
}

impl CrossConstraint {
    fn referenced(&self) -> Vec<&str> {
        match self {
            CrossConstraint::ImpliesNonempty { flag, target } | CrossConstraint::ImpliesZero { flag, target } => {
                vec![flag, target]
            }
            CrossConstraint::Feasibility { greater, lesser, adjust } => greater
                .iter()
                .chain(lesser)
                .map(|t| t.param.as_str())
                .chain(std::iter::once(adjust.as_str()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub params: IndexMap<String, ParamDomain>,
    #[serde(default)]
    pub constraints: Vec<CrossConstraint>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamConfig {
    pub values: BTreeMap<String, ParamValue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Missing,
    Unknown,
    WrongType,
    BelowLow,
    AboveHigh,
    NotAChoice,
    UnknownMember,
    DuplicateMember,
    TooFewMembers,
    TooManyMembers,
    ImpliesNonempty,
    ImpliesZero,
    Feasibility,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("rule serializes");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub param: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.param, self.rule, self.detail)
    }
}

impl ParamConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<ParamValue>) -> Self {
        self.values.insert(name.to_string(), value.into());
        self
    }

    pub fn set(&mut self, name: &str, value: impl Into<ParamValue>) {
        self.values.insert(name.to_string(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.values.get(name)
    }

    pub fn int(&self, name: &str) -> Option<i64> {
        self.get(name).and_then(ParamValue::as_int)
    }

    pub fn bool(&self, name: &str) -> Option<bool> {
        self.get(name).and_then(ParamValue::as_bool)
    }

    pub fn label(&self, name: &str) -> Option<Label> {
        self.get(name).and_then(ParamValue::as_label)
    }

    pub fn list(&self, name: &str) -> Option<&[Label]> {
        self.get(name).and_then(ParamValue::as_list)
    }

    /// Compact JSON with keys in sorted order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ParamError> {
        Ok(serde_json::from_str(text)?)
    }
}

fn int_value(v: Option<&ParamValue>) -> Option<i64> {
    v.and_then(ParamValue::as_int)
}

impl ParameterSpec {
    pub fn new(name: &str) -> Self {
        ParameterSpec {
            name: name.to_string(),
            params: IndexMap::new(),
            constraints: Vec::new(),
        }
    }

    pub fn param(mut self, name: &str, domain: ParamDomain) -> Self {
        self.params.insert(name.to_string(), domain);
        self
    }

    pub fn constraint(mut self, c: CrossConstraint) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, ParamError> {
        let spec: ParameterSpec = serde_json::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Checks the domain and constraint invariants.
    pub fn check(&self) -> Result<(), ParamError> {
        let bad = |msg: String| Err(ParamError::InvalidSpec(msg));
        for (name, dom) in &self.params {
            match &dom.kind {
                DomainKind::IntRange { low, high } if low > high => {
                    return bad(format!("{name}: low {low} > high {high}"));
                }
                DomainKind::Choice { choices } | DomainKind::SubsetOfChoices { choices, .. } => {
                    if choices.is_empty() {
                        return bad(format!("{name}: empty choice list"));
                    }
                    let uniq: BTreeSet<_> = choices.iter().collect();
                    if uniq.len() != choices.len() {
                        return bad(format!("{name}: duplicate choices"));
                    }
                    if let DomainKind::SubsetOfChoices {
                        min_subset_size,
                        max_subset_size,
                        ..
                    } = &dom.kind
                    {
                        if min_subset_size > max_subset_size || *max_subset_size > choices.len() {
                            return bad(format!("{name}: subset size bounds out of order"));
                        }
                    }
                }
                _ => {}
            }
            if let Some(d) = &dom.default {
                if !domain_violations(name, dom, d).is_empty() {
                    return bad(format!("{name}: default value is outside the domain"));
                }
            }
        }
        for c in &self.constraints {
            for p in c.referenced() {
                if !self.params.contains_key(p) {
                    return bad(format!("constraint references undeclared parameter `{p}`"));
                }
            }
            match c {
                CrossConstraint::ImpliesNonempty { flag, target } | CrossConstraint::ImpliesZero { flag, target } => {
                    if !matches!(self.params[flag].kind, DomainKind::Bool) {
                        return bad(format!("`{flag}` is used as a flag but is not boolean"));
                    }
                    let target_ok = match (&self.params[target].kind, c) {
                        (DomainKind::SubsetOfChoices { max_subset_size, .. }, CrossConstraint::ImpliesNonempty { .. }) => {
                            *max_subset_size >= 1
                        }
                        (DomainKind::SubsetOfChoices { min_subset_size, .. }, CrossConstraint::ImpliesZero { .. }) => {
                            *min_subset_size == 0
                        }
                        (DomainKind::IntRange { low, high }, CrossConstraint::ImpliesZero { .. }) => {
                            *low <= 0 && 0 <= *high
                        }
                        _ => false,
                    };
                    if !target_ok {
                        return bad(format!("`{target}` cannot satisfy its constraint"));
                    }
                }
                CrossConstraint::Feasibility { greater, lesser, adjust } => {
                    for t in greater.iter().chain(lesser) {
                        if !matches!(self.params[&t.param].kind, DomainKind::IntRange { .. }) {
                            return bad(format!("feasibility term `{}` is not an int range", t.param));
                        }
                    }
                    if !greater.iter().any(|t| &t.param == adjust && t.coef > 0) {
                        return bad(format!("`{adjust}` must appear on the greater side with a positive coefficient"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.params.values().map(ParamDomain::feature_width).sum()
    }

    /// One name per feature slot, in slot order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.feature_len());
        for (name, dom) in &self.params {
            match &dom.kind {
                DomainKind::IntRange { .. } | DomainKind::Bool => names.push(name.clone()),
                DomainKind::Choice { choices } | DomainKind::SubsetOfChoices { choices, .. } => {
                    names.extend(choices.iter().map(|c| format!("{name}={c}")));
                }
            }
        }
        names
    }
}

fn domain_violations(name: &str, dom: &ParamDomain, value: &ParamValue) -> Vec<Violation> {
    let v = |rule: Rule, detail: String| Violation {
        param: name.to_string(),
        rule,
        detail,
    };
    let mut out = Vec::new();
    match (&dom.kind, value) {
        (DomainKind::IntRange { low, high }, ParamValue::Int(x)) => {
            if x < low {
                out.push(v(Rule::BelowLow, format!("{x} < {low}")));
            } else if x > high {
                out.push(v(Rule::AboveHigh, format!("{x} > {high}")));
            }
        }
        (DomainKind::Bool, ParamValue::Bool(_)) => {}
        (DomainKind::Choice { choices }, ParamValue::Int(_) | ParamValue::Str(_)) => {
            let label = value.as_label().expect("scalar label");
            if !choices.contains(&label) {
                out.push(v(Rule::NotAChoice, format!("{label} is not one of the choices")));
            }
        }
        (
            DomainKind::SubsetOfChoices {
                choices,
                min_subset_size,
                max_subset_size,
            },
            ParamValue::List(members),
        ) => {
            let mut seen = BTreeSet::new();
            for m in members {
                if !choices.contains(m) {
                    out.push(v(Rule::UnknownMember, format!("{m} is not one of the choices")));
                } else if !seen.insert(m) {
                    out.push(v(Rule::DuplicateMember, format!("{m} appears more than once")));
                }
            }
            if members.len() < *min_subset_size {
                out.push(v(
                    Rule::TooFewMembers,
                    format!("{} members < {min_subset_size}", members.len()),
                ));
            } else if members.len() > *max_subset_size {
                out.push(v(
                    Rule::TooManyMembers,
                    format!("{} members > {max_subset_size}", members.len()),
                ));
            }
        }
        _ => out.push(v(Rule::WrongType, format!("{value:?} does not fit a {} domain", kind_name(&dom.kind)))),
    }
    out
}

fn kind_name(kind: &DomainKind) -> &'static str {
    match kind {
        DomainKind::IntRange { .. } => "int-range",
        DomainKind::Bool => "bool",
        DomainKind::Choice { .. } => "choice",
        DomainKind::SubsetOfChoices { .. } => "subset-of-choices",
    }
}

fn term_sum(terms: &[Term], values: &BTreeMap<String, ParamValue>) -> Option<i64> {
    terms
        .iter()
        .map(|t| int_value(values.get(&t.param)).map(|x| t.coef * x))
        .sum()
}

fn render_terms(terms: &[Term]) -> String {
    terms
        .iter()
        .map(|t| {
            if t.coef == 1 {
                t.param.clone()
            } else {
                format!("{}·{}", t.coef, t.param)
            }
        })
        .collect::<Vec<_>>()
        .join(" + ")
}

fn constraint_violation(c: &CrossConstraint, values: &BTreeMap<String, ParamValue>) -> Option<Violation> {
    match c {
        CrossConstraint::ImpliesNonempty { flag, target } => {
            let on = values.get(flag)?.as_bool()?;
            let members = values.get(target)?.as_list()?;
            (on && members.is_empty()).then(|| Violation {
                param: target.clone(),
                rule: Rule::ImpliesNonempty,
                detail: format!("{flag} is true but {target} is empty"),
            })
        }
        CrossConstraint::ImpliesZero { flag, target } => {
            let on = values.get(flag)?.as_bool()?;
            let nonzero = match values.get(target)? {
                ParamValue::Int(x) => *x != 0,
                ParamValue::List(l) => !l.is_empty(),
                _ => return None,
            };
            (!on && nonzero).then(|| Violation {
                param: target.clone(),
                rule: Rule::ImpliesZero,
                detail: format!("{flag} is false but {target} is not zero"),
            })
        }
        CrossConstraint::Feasibility { greater, lesser, adjust } => {
            let g = term_sum(greater, values)?;
            let l = term_sum(lesser, values)?;
            (g < l).then(|| Violation {
                param: adjust.clone(),
                rule: Rule::Feasibility,
                detail: format!("{} < {} ({g} < {l})", render_terms(greater), render_terms(lesser)),
            })
        }
    }
}

/// Lists every way `config` falls outside the design space. Empty iff the
/// config is in-domain.
pub fn validate(spec: &ParameterSpec, config: &ParamConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    for key in config.values.keys() {
        if !spec.params.contains_key(key) {
            out.push(Violation {
                param: key.clone(),
                rule: Rule::Unknown,
                detail: "not a declared parameter".into(),
            });
        }
    }
    for (name, dom) in &spec.params {
        match config.values.get(name) {
            None => out.push(Violation {
                param: name.clone(),
                rule: Rule::Missing,
                detail: "no value given".into(),
            }),
            Some(v) => out.extend(domain_violations(name, dom, v)),
        }
    }
    // Constraints are only judged over params that are individually well-typed.
    let typed: BTreeMap<String, ParamValue> = spec
        .params
        .iter()
        .filter_map(|(name, dom)| {
            let v = config.values.get(name)?;
            let wrong_type = domain_violations(name, dom, v).iter().any(|x| x.rule == Rule::WrongType);
            (!wrong_type).then(|| (name.clone(), v.clone()))
        })
        .collect();
    out.extend(spec.constraints.iter().filter_map(|c| constraint_violation(c, &typed)));
    out
}

/// Repairs a single value against its domain; `None` when the value has no
/// usable interpretation.
fn repair_value(dom: &ParamDomain, value: &ParamValue) -> Option<ParamValue> {
    match (&dom.kind, value) {
        (DomainKind::IntRange { low, high }, ParamValue::Int(x)) => Some(ParamValue::Int((*x).clamp(*low, *high))),
        (DomainKind::Bool, ParamValue::Bool(b)) => Some(ParamValue::Bool(*b)),
        (DomainKind::Choice { choices }, ParamValue::Int(_) | ParamValue::Str(_)) => {
            let label = value.as_label()?;
            choices.contains(&label).then(|| value.clone())
        }
        (
            DomainKind::SubsetOfChoices {
                choices,
                min_subset_size,
                max_subset_size,
            },
            ParamValue::List(members),
        ) => {
            let keep: BTreeSet<&Label> = members.iter().filter(|m| choices.contains(m)).collect();
            let mut chosen: Vec<Label> = choices.iter().filter(|c| keep.contains(c)).cloned().collect();
            for c in choices {
                if chosen.len() >= *min_subset_size {
                    break;
                }
                if !chosen.contains(c) {
                    chosen.push(c.clone());
                }
            }
            chosen.sort_by_key(|c| choices.iter().position(|x| x == c));
            chosen.truncate(*max_subset_size);
            Some(ParamValue::List(chosen))
        }
        _ => None,
    }
}

fn fallback_value(name: &str, dom: &ParamDomain) -> Result<ParamValue, ParamError> {
    if let Some(d) = &dom.default {
        return Ok(d.clone());
    }
    Err(ParamError::UnprojectableConfig { param: name.to_string() })
}

fn fix_constraint(
    spec: &ParameterSpec,
    c: &CrossConstraint,
    values: &mut BTreeMap<String, ParamValue>,
) -> Result<(), ParamError> {
    match c {
        CrossConstraint::ImpliesZero { target, .. } => {
            let zero = match values.get(target) {
                Some(ParamValue::List(_)) => ParamValue::List(Vec::new()),
                _ => ParamValue::Int(0),
            };
            values.insert(target.clone(), zero);
        }
        CrossConstraint::ImpliesNonempty { target, .. } => {
            if let DomainKind::SubsetOfChoices {
                choices,
                min_subset_size,
                ..
            } = &spec.params[target].kind
            {
                let n = (*min_subset_size).max(1);
                values.insert(target.clone(), ParamValue::List(choices.iter().take(n).cloned().collect()));
            }
        }
        CrossConstraint::Feasibility { greater, lesser, adjust } => {
            let bounds = |p: &str| match spec.params[p].kind {
                DomainKind::IntRange { low, high } => (low, high),
                _ => unreachable!("checked by ParameterSpec::check"),
            };
            let deficit = |values: &BTreeMap<String, ParamValue>| {
                term_sum(lesser, values).unwrap_or(0) - term_sum(greater, values).unwrap_or(0)
            };
            let d = deficit(values);
            if d > 0 {
                let coef: i64 = greater.iter().filter(|t| &t.param == adjust).map(|t| t.coef).sum();
                let cur = int_value(values.get(adjust)).unwrap_or(0);
                let raised = (cur + (d + coef - 1) / coef).min(bounds(adjust).1);
                values.insert(adjust.clone(), ParamValue::Int(raised));
            }
            for t in lesser.iter().filter(|t| t.coef > 0) {
                let d = deficit(values);
                if d <= 0 {
                    break;
                }
                let cur = int_value(values.get(&t.param)).unwrap_or(0);
                let lowered = (cur - (d + t.coef - 1) / t.coef).max(bounds(&t.param).0);
                values.insert(t.param.clone(), ParamValue::Int(lowered));
            }
            if deficit(values) > 0 {
                return Err(ParamError::Infeasible { param: adjust.clone() });
            }
        }
    }
    Ok(())
}

/// Maps `config` onto the design space.
///
/// Ints clamp to the nearest bound, unknown subset members are dropped and
/// subsets are grown or shrunk in choice order, unknown keys are removed, and
/// violated constraints are repaired (feasibility by minimally raising the
/// adjustable parameter). Values that already satisfy their domain are kept
/// verbatim, so in-domain configs come back unchanged.
pub fn project(spec: &ParameterSpec, config: &ParamConfig) -> Result<ParamConfig, ParamError> {
    let mut values = BTreeMap::new();
    for (name, dom) in &spec.params {
        let v = match config.values.get(name) {
            Some(v) if domain_violations(name, dom, v).is_empty() => v.clone(),
            Some(v) => match repair_value(dom, v) {
                Some(r) => r,
                None => fallback_value(name, dom)?,
            },
            None => fallback_value(name, dom)?,
        };
        values.insert(name.clone(), v);
    }
    for _ in 0..=spec.constraints.len() {
        let mut clean = true;
        for c in &spec.constraints {
            if constraint_violation(c, &values).is_some() {
                clean = false;
                fix_constraint(spec, c, &mut values)?;
            }
        }
        if clean {
            break;
        }
    }
    let out = ParamConfig { values };
    match validate(spec, &out).first() {
        None => Ok(out),
        Some(v) => Err(ParamError::Infeasible { param: v.param.clone() }),
    }
}

/// Draws a configuration uniformly per parameter, then projects it.
pub fn sample_uniform(spec: &ParameterSpec, seed: Seed) -> ParamConfig {
    let mut rng = seed::rng(seed);
    let mut config = ParamConfig::new();
    for (name, dom) in &spec.params {
        let value = match &dom.kind {
            DomainKind::IntRange { low, high } => ParamValue::Int(rng.random_range(*low..=*high)),
            DomainKind::Bool => ParamValue::Bool(rng.random_bool(0.5)),
            DomainKind::Choice { choices } => choices.choose(&mut rng).expect("non-empty").clone().into(),
            DomainKind::SubsetOfChoices {
                choices,
                min_subset_size,
                max_subset_size,
            } => {
                let k = rng.random_range(*min_subset_size..=*max_subset_size);
                let mut picked: Vec<Label> = choices.choose_multiple(&mut rng, k).cloned().collect();
                picked.sort_by_key(|c| choices.iter().position(|x| x == c));
                ParamValue::List(picked)
            }
        };
        config.values.insert(name.clone(), value);
    }
    project(spec, &config).expect("checked specs always admit a projection")
}

/// One random move per parameter, drawn in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub enum Move {
    /// Multiplier in {-1, 0, +1} of the parameter's step size.
    Step(i64),
    Flip(bool),
    /// Replace a choice by the choice at this index.
    Switch(Option<usize>),
    /// Toggle membership of the choice at this index.
    Toggle(Option<usize>),
}

pub const BOOL_FLIP_PROB: f64 = 0.1;
pub const CHOICE_SWITCH_PROB: f64 = 0.1;
pub const SUBSET_TOGGLE_PROB: f64 = 0.2;

/// Step size for an int range: `ceil((high - low) / 20)`, at least 1.
pub fn step_size(low: i64, high: i64) -> i64 {
    let range = high - low;
    ((range + 19) / 20).max(1)
}

pub fn plan_perturbation(spec: &ParameterSpec, rng: &mut impl Rng) -> Vec<Move> {
    spec.params
        .values()
        .map(|dom| match &dom.kind {
            DomainKind::IntRange { .. } => Move::Step(rng.random_range(-1..=1)),
            DomainKind::Bool => Move::Flip(rng.random_bool(BOOL_FLIP_PROB)),
            DomainKind::Choice { choices } => {
                let switch = rng.random_bool(CHOICE_SWITCH_PROB);
                let idx = rng.random_range(0..choices.len());
                Move::Switch(switch.then_some(idx))
            }
            DomainKind::SubsetOfChoices { choices, .. } => {
                let toggle = rng.random_bool(SUBSET_TOGGLE_PROB);
                let idx = rng.random_range(0..choices.len());
                Move::Toggle(toggle.then_some(idx))
            }
        })
        .collect()
}

pub fn apply_perturbation(spec: &ParameterSpec, base: &ParamConfig, moves: &[Move]) -> Result<ParamConfig, ParamError> {
    let mut out = base.clone();
    for ((name, dom), mv) in spec.params.iter().zip(moves) {
        let Some(cur) = base.values.get(name) else { continue };
        let next = match (&dom.kind, mv, cur) {
            (DomainKind::IntRange { low, high }, Move::Step(s), ParamValue::Int(x)) => {
                ParamValue::Int(x + s * step_size(*low, *high))
            }
            (DomainKind::Bool, Move::Flip(true), ParamValue::Bool(b)) => ParamValue::Bool(!b),
            (DomainKind::Choice { choices }, Move::Switch(Some(i)), _) => choices[*i].clone().into(),
            (DomainKind::SubsetOfChoices { choices, .. }, Move::Toggle(Some(i)), ParamValue::List(members)) => {
                let target = &choices[*i];
                let mut members = members.clone();
                if let Some(pos) = members.iter().position(|m| m == target) {
                    members.remove(pos);
                } else {
                    members.push(target.clone());
                    members.sort_by_key(|c| choices.iter().position(|x| x == c));
                }
                ParamValue::List(members)
            }
            _ => cur.clone(),
        };
        out.values.insert(name.clone(), next);
    }
    project(spec, &out)
}

/// Returns a noisy neighbour of `base`: ints move by one step of
/// `ceil(range/20)` in a uniform direction (or stay), bools flip with
/// probability 0.1, choices switch with probability 0.1, and each subset has
/// one element toggled with probability 0.2. The result is projected.
pub fn perturb(spec: &ParameterSpec, base: &ParamConfig, seed: Seed) -> ParamConfig {
    let mut rng = seed::rng(seed);
    let moves = plan_perturbation(spec, &mut rng);
    apply_perturbation(spec, base, &moves).expect("perturbing an in-domain config stays projectable")
}

/// Fixed-length numeric encoding in declaration order: ints min-max scaled,
/// bools 0/1, choices one-hot, subsets as membership indicators.
pub fn featurize(spec: &ParameterSpec, config: &ParamConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.feature_len());
    for (name, dom) in &spec.params {
        let v = config.values.get(name);
        match &dom.kind {
            DomainKind::IntRange { low, high } => {
                let x = int_value(v).unwrap_or(*low);
                out.push(if high > low {
                    (x - low) as f64 / (high - low) as f64
                } else {
                    0.0
                });
            }
            DomainKind::Bool => out.push(f64::from(u8::from(v.and_then(ParamValue::as_bool).unwrap_or(false)))),
            DomainKind::Choice { choices } => {
                let label = v.and_then(ParamValue::as_label);
                out.extend(choices.iter().map(|c| f64::from(u8::from(Some(c) == label.as_ref()))));
            }
            DomainKind::SubsetOfChoices { choices, .. } => {
                let members = v.and_then(ParamValue::as_list).unwrap_or(&[]);
                out.extend(choices.iter().map(|c| f64::from(u8::from(members.contains(c)))));
            }
        }
    }
    out
}

/// Converts loosely-typed JSON (typically parsed from model output) into a
/// config, coercing each declared field to its domain's value type where an
/// obvious reading exists. Undeclared keys are ignored.
pub fn coerce_json(spec: &ParameterSpec, obj: &Map<String, Value>) -> ParamConfig {
    let mut config = ParamConfig::new();
    for (name, dom) in &spec.params {
        let Some(raw) = obj.get(name) else { continue };
        let int_choices = match &dom.kind {
            DomainKind::Choice { choices } | DomainKind::SubsetOfChoices { choices, .. } => {
                choices.iter().all(|c| matches!(c, Label::Int(_)))
            }
            _ => false,
        };
        let value = match &dom.kind {
            DomainKind::IntRange { .. } => coerce_int(raw).map(ParamValue::Int),
            DomainKind::Bool => match raw {
                Value::Bool(b) => Some(ParamValue::Bool(*b)),
                Value::String(s) if s.eq_ignore_ascii_case("true") => Some(ParamValue::Bool(true)),
                Value::String(s) if s.eq_ignore_ascii_case("false") => Some(ParamValue::Bool(false)),
                _ => None,
            },
            DomainKind::Choice { .. } => coerce_label(raw, int_choices).map(ParamValue::from),
            DomainKind::SubsetOfChoices { .. } => match raw {
                Value::Array(items) => Some(ParamValue::List(
                    items.iter().filter_map(|i| coerce_label(i, int_choices)).collect(),
                )),
                _ => None,
            },
        };
        if let Some(v) = value {
            config.values.insert(name.clone(), v);
        }
    }
    config
}

fn coerce_int(raw: &Value) -> Option<i64> {
    match raw {
        Value::Number(n) => n.as_i64().or_else(|| n.as_f64().map(|f| f.round() as i64)),
        Value::String(s) => s.trim().parse::<f64>().ok().map(|f| f.round() as i64),
        _ => None,
    }
}

fn coerce_label(raw: &Value, prefer_int: bool) -> Option<Label> {
    match raw {
        Value::Number(_) => coerce_int(raw).map(Label::Int),
        Value::String(s) if prefer_int => s.trim().parse::<i64>().ok().map(Label::Int),
        Value::String(s) => Some(Label::Str(s.clone())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ParameterSpec {
        ParameterSpec::new("toy")
            .param("width", ParamDomain::int_range(5, 100))
            .param("flag", ParamDomain::boolean())
            .param("mode", ParamDomain::choice(["a", "b", "c"]))
            .param("rot", ParamDomain::subset([0, 90, 180, 270, 360].map(Label::Int), 0, 5))
            .param("count", ParamDomain::int_range(0, 15))
            .constraint(CrossConstraint::ImpliesNonempty {
                flag: "flag".into(),
                target: "rot".into(),
            })
            .constraint(CrossConstraint::ImpliesZero {
                flag: "flag".into(),
                target: "count".into(),
            })
    }

    fn good() -> ParamConfig {
        ParamConfig::new()
            .with("width", 100)
            .with("flag", true)
            .with("mode", "b")
            .with("rot", vec![Label::Int(90), Label::Int(180)])
            .with("count", 4)
    }

    #[test]
    fn in_domain_point_has_no_violations() {
        assert!(validate(&toy(), &good()).is_empty());
    }

    #[test]
    fn above_high_is_reported() {
        let v = validate(&toy(), &good().with("width", 150));
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].param.as_str(), v[0].rule), ("width", Rule::AboveHigh));
    }

    #[test]
    fn missing_unknown_and_wrong_type() {
        let mut c = good().with("extra", 1).with("mode", true);
        c.values.remove("width");
        let rules: Vec<Rule> = validate(&toy(), &c).iter().map(|v| v.rule).collect();
        assert!(rules.contains(&Rule::Unknown));
        assert!(rules.contains(&Rule::Missing));
        assert!(rules.contains(&Rule::WrongType));
    }

    #[test]
    fn projection_clamps_and_is_identity_in_domain() {
        let p = project(&toy(), &good().with("width", 150)).unwrap();
        assert_eq!(p.int("width"), Some(100));
        assert_eq!(project(&toy(), &good()).unwrap(), good());
    }

    #[test]
    fn projection_repairs_flag_couplings() {
        let c = good().with("flag", false);
        let p = project(&toy(), &c).unwrap();
        assert_eq!(p.int("count"), Some(0));
        let c = good().with("rot", Vec::<Label>::new());
        let p = project(&toy(), &c).unwrap();
        assert_eq!(p.list("rot"), Some(&[Label::Int(0)][..]));
    }

    #[test]
    fn projection_drops_unknown_members_and_keys() {
        let c = good()
            .with("rot", vec![Label::Int(45), Label::Int(180), Label::Int(90), Label::Int(180)])
            .with("bogus", 3);
        let p = project(&toy(), &c).unwrap();
        assert_eq!(p.list("rot"), Some(&[Label::Int(90), Label::Int(180)][..]));
        assert!(p.get("bogus").is_none());
    }

    #[test]
    fn missing_without_default_is_unprojectable() {
        let mut c = good();
        c.values.remove("mode");
        assert!(matches!(
            project(&toy(), &c),
            Err(ParamError::UnprojectableConfig { param }) if param == "mode"
        ));
        let mut spec = toy();
        spec.params["mode"].default = Some("c".into());
        assert_eq!(project(&spec, &c).unwrap().label("mode"), Some(Label::from("c")));
    }

    #[test]
    fn featurize_scales_and_indicates() {
        let spec = toy();
        let f = featurize(&spec, &good().with("width", 5));
        assert_eq!(f.len(), spec.feature_len());
        assert_eq!(f[0], 0.0);
        assert_eq!(featurize(&spec, &good())[0], 1.0);
        // rot slots come after width, flag, and the three mode slots
        assert_eq!(&f[5..10], &[0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(spec.feature_names()[5], "rot=0");
    }

    #[test]
    fn perturb_steps_by_twentieth_of_range() {
        let spec = toy();
        let base = good().with("width", 50);
        let mut moves = vec![Move::Step(1), Move::Flip(false), Move::Switch(None), Move::Toggle(None), Move::Step(0)];
        assert_eq!(apply_perturbation(&spec, &base, &moves).unwrap().int("width"), Some(55));
        let at_bound = good();
        assert_eq!(apply_perturbation(&spec, &at_bound, &moves).unwrap().int("width"), Some(100));
        moves[0] = Move::Step(0);
        assert_eq!(apply_perturbation(&spec, &base, &moves).unwrap(), base);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = toy();
        let text = spec.to_json_pretty();
        let back = ParameterSpec::from_json(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_json_pretty(), text);
        assert!(text.contains("\"kind\": \"int-range\""));
    }

    #[test]
    fn spec_check_rejects_bad_domains() {
        let bad = ParameterSpec::new("bad").param("x", ParamDomain::int_range(3, 1));
        assert!(bad.check().is_err());
        let bad = ParameterSpec::new("bad").param("x", ParamDomain::choice(["a", "a"]));
        assert!(bad.check().is_err());
        let bad = toy().constraint(CrossConstraint::ImpliesZero {
            flag: "nope".into(),
            target: "count".into(),
        });
        assert!(bad.check().is_err());
    }

    #[test]
    fn coerce_handles_model_output_quirks() {
        let obj: Map<String, Value> = serde_json::from_str(
            r#"{"width": 12.0, "flag": "true", "mode": "a", "rot": ["90", 180], "count": "3", "thought_process": "x"}"#,
        )
        .unwrap();
        let c = coerce_json(&toy(), &obj);
        assert_eq!(c.int("width"), Some(12));
        assert_eq!(c.bool("flag"), Some(true));
        assert_eq!(c.list("rot"), Some(&[Label::Int(90), Label::Int(180)][..]));
        assert_eq!(c.int("count"), Some(3));
        assert!(validate(&toy(), &c).is_empty());
    }
}
