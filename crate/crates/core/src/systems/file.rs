use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ContinuousSystem, ControlLaw, ErrorKind};
use crate::closedloop::{match_controller, DesiredMap};
use crate::expr::{Env, VectorExpression};
use crate::rk::TableauSpec;
use crate::{Error, Result};

/// JSON system definition:
///
/// ```json
/// {"state_dim": 1, "input_dim": 1, "f": ["x[0]^3 + u[0]"],
///  "control": {"error_dim": 1, "error_kind": "state-measurement",
///              "U": ["..."], "T_u": 1.0}}
/// ```
///
/// Instead of `"U"`, `"control"` may carry `"match"`, which synthesises the
/// law that makes the Euler model of the plant equal a desired map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub state_dim: usize,
    pub input_dim: usize,
    pub f: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub error_dim: usize,
    pub error_kind: ErrorKind,
    #[serde(rename = "U", default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<String>>,
    #[serde(rename = "T_u")]
    pub t_u: f64,
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub matching: Option<MatchSpec>,
}

/// Target of a model-matching controller: either a Runge-Kutta model of a
/// desired field `f_d(x)`, or an explicit map `F_d(x, T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatchSpec {
    Tableau {
        desired_tableau: TableauSpec,
        desired_field: Vec<String>,
    },
    Map {
        desired_map: Vec<String>,
    },
}

impl SystemFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Invalid(format!("parsing {}: {e}", path.display())))
    }

    pub fn system(&self) -> Result<ContinuousSystem> {
        ContinuousSystem::parse(self.state_dim, self.input_dim, &self.f)
    }

    pub fn law(&self, sys: &ContinuousSystem) -> Result<ControlLaw> {
        let spec = self
            .control
            .as_ref()
            .ok_or_else(|| Error::Invalid("system file has no \"control\" section".into()))?;
        let law = match (&spec.u, &spec.matching) {
            (Some(u), None) => ControlLaw::parse(self.state_dim, spec.error_dim, spec.error_kind, spec.t_u, u)?,
            (None, Some(m)) => {
                if spec.error_kind != ErrorKind::StateMeasurement {
                    return Err(Error::Invalid(
                        "matched controllers are built for state-measurement errors".into(),
                    ));
                }
                let desired = match m {
                    MatchSpec::Tableau {
                        desired_tableau,
                        desired_field,
                    } => DesiredMap::RungeKutta {
                        tableau: desired_tableau.resolve()?,
                        field: VectorExpression::parse(
                            desired_field,
                            &Env::new().var("x", self.state_dim),
                        )?,
                    },
                    MatchSpec::Map { desired_map } => DesiredMap::Map(VectorExpression::parse(
                        desired_map,
                        &ControlLaw::nominal_env(self.state_dim),
                    )?),
                };
                match_controller(&crate::rk::ButcherTableau::euler(), &desired, sys, spec.t_u)?
            }
            _ => {
                return Err(Error::Invalid(
                    "control needs exactly one of \"U\" or \"match\"".into(),
                ))
            }
        };
        if law.error_dim() != spec.error_dim {
            return Err(Error::Dimension(format!(
                "declared error_dim {} but law uses {}",
                spec.error_dim,
                law.error_dim()
            )));
        }
        if law.input_dim() != self.input_dim {
            return Err(Error::Dimension(format!(
                "law produces {} inputs, plant takes {}",
                law.input_dim(),
                self.input_dim
            )));
        }
        Ok(law)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_law_file() {
        let text = r#"{"state_dim": 1, "input_dim": 1, "f": ["x[0]^3 + u[0]"],
            "control": {"error_dim": 1, "error_kind": "state-measurement",
                        "U": ["-(x[0]+e[0])^3 - 2*(x[0]+e[0])"], "T_u": 1.0}}"#;
        let file: SystemFile = serde_json::from_str(text).unwrap();
        let sys = file.system().unwrap();
        let law = file.law(&sys).unwrap();
        assert_eq!(law.apply(&[1.0], &[0.0], 0.1).unwrap(), vec![-3.0]);
    }

    #[test]
    fn matched_law_file() {
        let text = r#"{"state_dim": 1, "input_dim": 1, "f": ["x[0]^3 + u[0]"],
            "control": {"error_dim": 1, "error_kind": "state-measurement", "T_u": 1.0,
                        "match": {"desired_tableau": "heun", "desired_field": ["-x[0]^3 - 2*x[0]"]}}}"#;
        let file: SystemFile = serde_json::from_str(text).unwrap();
        let sys = file.system().unwrap();
        let law = file.law(&sys).unwrap();
        let u = law.apply(&[1.0], &[0.0], 0.1).unwrap();
        assert!((u[0] + 3.3715).abs() < 1e-12);
    }

    #[test]
    fn both_or_neither_law_sources_rejected() {
        let text = r#"{"state_dim": 1, "input_dim": 1, "f": ["u[0]"],
            "control": {"error_dim": 1, "error_kind": "state-measurement", "T_u": 1.0}}"#;
        let file: SystemFile = serde_json::from_str(text).unwrap();
        assert!(file.law(&file.system().unwrap()).is_err());
    }
}
