//! Designer backed by a chat model.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{summarize_feedback, Designer, DesignerDeps, DesignerError, ProposeCtx};
use crate::env::arith::ArithOperator;
use crate::env::EnvKind;
use crate::gateway::{ChatBackend, ChatRequest, Message};
use crate::jsonx;
use crate::paramspace::{self, ParamConfig, ParameterSpec, Violation};

pub const ARITHMETIC_TEMPLATE: &str = include_str!("../../templates/designer_arithmetic.txt");
pub const SPATIAL_TEMPLATE: &str = include_str!("../../templates/designer_spatial.txt");

pub const DEFAULT_RETRIES: usize = 3;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_REASONING_TOKENS: u32 = 4096;

fn default_model() -> String {
    "designer".into()
}
fn default_retries() -> usize {
    DEFAULT_RETRIES
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_reasoning() -> u32 {
    DEFAULT_REASONING_TOKENS
}
fn default_output() -> u32 {
    2048
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmDesignerConfig {
    #[serde(default = "default_model")]
    pub model: String,
    /// Prompt template; the built-in one for the environment when absent.
    #[serde(default)]
    pub template: Option<PathBuf>,
    /// Re-prompts after an invalid proposal.
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_reasoning")]
    pub max_reasoning_tokens: u32,
    #[serde(default = "default_output")]
    pub max_output_tokens: u32,
}

impl Default for LlmDesignerConfig {
    fn default() -> Self {
        LlmDesignerConfig {
            model: default_model(),
            template: None,
            retries: DEFAULT_RETRIES,
            temperature: DEFAULT_TEMPERATURE,
            max_reasoning_tokens: DEFAULT_REASONING_TOKENS,
            max_output_tokens: default_output(),
        }
    }
}

/// Operator list shown to the arithmetic designer.
pub fn operator_list() -> String {
    let names: Vec<&str> = ArithOperator::ALL.iter().map(|o| o.name()).collect();
    format!("[{}]", names.join(", "))
}

/// Fills `{target_regret}` (1 − ρ), `{target_accuracy}` (ρ), `{feedback}` and
/// `{operators}`. Feedback is appended when the template has no slot for it.
pub fn render_template(template: &str, rho: f64, feedback: &str) -> String {
    let regret = format!("{}", round4(1.0 - rho));
    let mut out = template
        .replace("{target_regret}", &regret)
        .replace("{target_accuracy}", &format!("{rho}"))
        .replace("{operators}", &operator_list());
    if out.contains("{feedback}") {
        out = out.replace("{feedback}", feedback);
    } else if !feedback.is_empty() {
        out.push_str("\n\nHere is the feedback from the previous iterations, which you can use to generate new parameters:\n");
        out.push_str(feedback);
    }
    out
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Renames response fields onto parameter names. The arithmetic schema asks
/// for a concrete `operator_sequence`; the design space only records which
/// operators are allowed, so the sequence collapses to its distinct members.
pub fn map_response(spec: &ParameterSpec, obj: &Map<String, Value>) -> ParamConfig {
    let mut obj = obj.clone();
    if !spec.params.contains_key("operator_sequence") && spec.params.contains_key("operators") {
        if let Some(Value::Array(seq)) = obj.remove("operator_sequence") {
            let mut distinct: Vec<Value> = Vec::new();
            for item in seq {
                let norm = match &item {
                    Value::String(s) => match s.parse::<ArithOperator>() {
                        Ok(op) => Value::String(op.name().to_string()),
                        Err(_) => item.clone(),
                    },
                    _ => item.clone(),
                };
                if !distinct.contains(&norm) {
                    distinct.push(norm);
                }
            }
            obj.entry("operators").or_insert(Value::Array(distinct));
        }
    }
    paramspace::coerce_json(spec, &obj)
}

fn violation_message(violations: &[Violation]) -> String {
    let lines: Vec<String> = violations.iter().map(|v| format!("- {v}")).collect();
    format!(
        "The parameters you proposed are invalid:\n{}\nPlease answer again with a corrected JSON object.",
        lines.join("\n")
    )
}

/// One proposal round: prompt, parse, validate, re-prompt up to `retries`
/// times, then project the last parsed proposal.
pub fn llm_propose(
    template: &str,
    spec: &ParameterSpec,
    rho: f64,
    history: &[super::HistoryEntry],
    gateway: &dyn ChatBackend,
    cfg: &LlmDesignerConfig,
) -> Result<ParamConfig, DesignerError> {
    let prompt = render_template(template, rho, &summarize_feedback(history, rho));
    let mut messages = vec![Message::user(prompt)];
    let mut last_parse: Option<ParamConfig> = None;
    for attempt in 0..=cfg.retries {
        let request = ChatRequest {
            temperature: cfg.temperature,
            max_reasoning_tokens: cfg.max_reasoning_tokens,
            max_output_tokens: cfg.max_output_tokens,
            ..ChatRequest::new(&cfg.model, messages.clone())
        };
        let reply = gateway.chat(&request)?;
        let follow_up = match jsonx::last_json_object(&reply.content) {
            None => "Your answer did not contain a JSON object. Reply with the JSON object described above.".to_string(),
            Some(obj) => {
                let config = map_response(spec, &obj);
                let violations = paramspace::validate(spec, &config);
                if violations.is_empty() {
                    return Ok(config);
                }
                last_parse = Some(config);
                violation_message(&violations)
            }
        };
        if attempt < cfg.retries {
            messages.push(Message::assistant(reply.content));
            messages.push(Message::user(follow_up));
        }
    }
    match last_parse {
        Some(config) => Ok(paramspace::project(spec, &config)?),
        None => Err(DesignerError::UnparseableResponse {
            attempts: cfg.retries + 1,
        }),
    }
}

pub struct LlmDesigner {
    cfg: LlmDesignerConfig,
    template: String,
    gateway: Arc<dyn ChatBackend>,
}

impl LlmDesigner {
    pub fn new(cfg: LlmDesignerConfig, deps: &DesignerDeps) -> Result<Self, DesignerError> {
        let gateway = deps
            .gateway
            .clone()
            .ok_or_else(|| DesignerError::Config("llm designer needs a gateway".into()))?;
        let template = match &cfg.template {
            Some(path) => std::fs::read_to_string(path).map_err(|e| DesignerError::Io {
                path: path.clone(),
                reason: e.to_string(),
            })?,
            None => match deps.env.kind {
                EnvKind::Arithmetic => ARITHMETIC_TEMPLATE.to_string(),
                EnvKind::Spatial => SPATIAL_TEMPLATE.to_string(),
                EnvKind::Synthetic => {
                    return Err(DesignerError::Config("synthetic environments need an explicit template".into()))
                }
            },
        };
        Ok(LlmDesigner { cfg, template, gateway })
    }
}

impl Designer for LlmDesigner {
    fn name(&self) -> &'static str {
        "llm"
    }

    fn propose(&mut self, ctx: &ProposeCtx<'_>) -> Result<ParamConfig, DesignerError> {
        llm_propose(&self.template, ctx.spec, ctx.rho, ctx.history, self.gateway.as_ref(), &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::arith;

    #[test]
    fn renders_placeholders() {
        let out = render_template(ARITHMETIC_TEMPLATE, 0.25, "Iteration 1: x");
        assert!(out.contains("regret at 0.75,"));
        assert!(out.contains("[add, sub, mul, div, sqrt, pow]"));
        assert!(out.contains("Iteration 1: x"));
        assert!(!out.contains('{') || out.contains("\"N\": int"));
        let sp = render_template(SPATIAL_TEMPLATE, 0.9, "Iteration 1: y");
        assert!(sp.contains("target accuracy of 0.9."));
        assert!(sp.ends_with("Iteration 1: y"));
        assert!(!render_template(SPATIAL_TEMPLATE, 0.9, "").contains("feedback"));
    }

    #[test]
    fn sequence_collapses_to_operators() {
        let spec = arith::parameter_spec();
        let obj = jsonx::last_json_object(
            r#"{"N": 6, "K": 2, "max_range_of_nums": 20, "type_of_nums": "int",
               "operator_sequence": ["mul", "add", "mul", "sqrt", "add", "sqrt"]}"#,
        )
        .unwrap();
        let c = map_response(&spec, &obj);
        let ops: Vec<String> = c.list("operators").unwrap().iter().map(|l| l.to_string()).collect();
        assert_eq!(ops, ["mul", "add", "sqrt"]);
        assert!(paramspace::validate(&spec, &c).is_empty());
    }
}
