//! Problem generators. An [`Environment`] pairs a generator with its design
//! space; a [`Dataset`] is one rollout's worth of problems from one config.

pub mod arith;
pub mod spatial;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::paramspace::{self, ParamConfig, ParamError, ParameterSpec};
use crate::seed::{self, Seed};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Arith(#[from] arith::ArithError),
    #[error(transparent)]
    Spatial(#[from] spatial::SpatialError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("config is out of domain: {0}")]
    OutOfDomain(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Arithmetic,
    Spatial,
    /// Items carry no content; only a scored target makes sense of them.
    Synthetic,
}

impl EnvKind {
    /// Problems per rollout during search.
    pub fn search_rollout_size(self) -> usize {
        match self {
            EnvKind::Arithmetic => 10,
            EnvKind::Spatial => 250,
            EnvKind::Synthetic => 200,
        }
    }

    /// Problems per seed in the final evaluation.
    pub fn eval_size(self) -> usize {
        match self {
            EnvKind::Arithmetic => 75,
            EnvKind::Spatial => 500,
            EnvKind::Synthetic => 500,
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arithmetic" | "arith" => Ok(EnvKind::Arithmetic),
            "spatial" => Ok(EnvKind::Spatial),
            "synthetic" => Ok(EnvKind::Synthetic),
            other => Err(format!("unknown environment `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Problem {
    Arithmetic(arith::ArithProblem),
    Spatial(Box<spatial::SpatialProblem>),
    Synthetic { id: usize },
}

impl Problem {
    pub fn prompt(&self) -> Option<&str> {
        match self {
            Problem::Arithmetic(p) => Some(&p.prompt),
            Problem::Spatial(p) => Some(&p.prompt),
            Problem::Synthetic { .. } => None,
        }
    }

    /// Scores a raw response. Synthetic items have nothing to check against.
    pub fn check_response(&self, response: &str) -> bool {
        match self {
            Problem::Arithmetic(p) => arith::score_response(p, response),
            Problem::Spatial(p) => spatial::verify_answer(p, response),
            Problem::Synthetic { .. } => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub env: EnvKind,
    pub config: ParamConfig,
    pub problems: Vec<Problem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    /// One JSON object per line, no trailing newline after the last.
    pub fn to_jsonl(&self) -> String {
        self.problems
            .iter()
            .map(|p| serde_json::to_string(p).expect("problems serialize"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub kind: EnvKind,
    pub spec: ParameterSpec,
}

impl Environment {
    pub fn arithmetic() -> Self {
        Environment {
            kind: EnvKind::Arithmetic,
            spec: arith::parameter_spec(),
        }
    }

    pub fn spatial() -> Self {
        Environment {
            kind: EnvKind::Spatial,
            spec: spatial::parameter_spec(),
        }
    }

    pub fn synthetic(spec: ParameterSpec) -> Self {
        Environment {
            kind: EnvKind::Synthetic,
            spec,
        }
    }

    /// Built-in environment for a kind; synthetic ones need an explicit spec.
    pub fn builtin(kind: EnvKind) -> Option<Self> {
        match kind {
            EnvKind::Arithmetic => Some(Self::arithmetic()),
            EnvKind::Spatial => Some(Self::spatial()),
            EnvKind::Synthetic => None,
        }
    }

    /// Generates `n` problems; problem `j` uses seed `derive(seed, "problem", j)`.
    pub fn generate(&self, config: &ParamConfig, n: usize, seed: Seed) -> Result<Dataset, EnvError> {
        let violations = paramspace::validate(&self.spec, config);
        if !violations.is_empty() {
            let detail: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(EnvError::OutOfDomain(detail.join("; ")));
        }
        let item_seed = |j: usize| seed::derive(seed, "problem", j as u64);
        let problems = match self.kind {
            EnvKind::Arithmetic => {
                let params = arith::ArithParams::from_config(config)?;
                (0..n)
                    .map(|j| arith::generate_problem(&params, item_seed(j)).map(Problem::Arithmetic))
                    .collect::<Result<_, _>>()?
            }
            EnvKind::Spatial => {
                let params = spatial::SpatialParams::from_config(config)?;
                (0..n)
                    .map(|j| spatial::generate_problem(&params, item_seed(j)).map(|p| Problem::Spatial(Box::new(p))))
                    .collect::<Result<_, _>>()?
            }
            EnvKind::Synthetic => (0..n).map(|id| Problem::Synthetic { id }).collect(),
        };
        Ok(Dataset {
            env: self.kind,
            config: config.clone(),
            problems,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes() {
        assert_eq!(EnvKind::Arithmetic.search_rollout_size(), 10);
        assert_eq!(EnvKind::Spatial.search_rollout_size(), 250);
        assert_eq!(EnvKind::Arithmetic.eval_size(), 75);
        assert_eq!(EnvKind::Spatial.eval_size(), 500);
    }

    #[test]
    fn datasets_are_seeded() {
        let env = Environment::arithmetic();
        let cfg = paramspace::sample_uniform(&env.spec, 4);
        let a = env.generate(&cfg, 5, 9).unwrap();
        assert_eq!(a, env.generate(&cfg, 5, 9).unwrap());
        assert_ne!(a, env.generate(&cfg, 5, 10).unwrap());
        assert_eq!(a.to_jsonl().lines().count(), 5);
    }

    #[test]
    fn out_of_domain_configs_are_refused() {
        let env = Environment::spatial();
        let mut cfg = paramspace::project(&env.spec, &ParamConfig::new()).unwrap();
        cfg.set("width", 3i64);
        assert!(matches!(env.generate(&cfg, 1, 0), Err(EnvError::OutOfDomain(_))));
    }
}
