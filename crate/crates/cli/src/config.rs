//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use sdstab_core::closedloop::{Backend, ClosedLoopModel, DisturbanceSignal, SamplingSchedule};
use sdstab_core::consistency::{RepcParams, RepmcParams};
use sdstab_core::rk::TableauSpec;
use sdstab_core::sampling::stream_rng;
use sdstab_core::stability::{IntersampleParams, IssParams, LyapunovParams, LyapunovSpecFile, TStarSearch};
use sdstab_core::systems::{ContinuousSystem, ControlLaw, FlowOracleConfig, SystemFile};

use crate::error::{CliError, Result};
use crate::Task;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must agree with the subcommand when given.
    #[serde(default)]
    pub task: Option<Task>,
    /// System definition file, relative to the config file.
    #[serde(default)]
    pub system: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    /// Second model of a consistency pair.
    #[serde(default)]
    pub model_b: Option<ModelSpec>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub disturbance: Option<DisturbanceSpec>,
    #[serde(default)]
    pub repc: Option<RepcParams>,
    #[serde(default)]
    pub repmc: Option<RepmcParams>,
    #[serde(default)]
    pub iss: Option<IssParams>,
    #[serde(default)]
    pub tstar: Option<TStarSearch>,
    #[serde(default)]
    pub transfer: Option<TransferSpec>,
    #[serde(default)]
    pub lyapunov: Option<LyapunovTask>,
    #[serde(default)]
    pub intersample: Option<IntersampleParams>,
    /// ISS certificate file, relative to the config file.
    #[serde(default)]
    pub certificate: Option<PathBuf>,
    /// Consistency certificate file, relative to the config file.
    #[serde(default)]
    pub consistency_certificate: Option<PathBuf>,
    #[serde(default)]
    pub example: Option<ExampleSpec>,
    #[serde(default)]
    pub output: OutputSpec,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Exact {
        #[serde(default)]
        oracle: FlowOracleConfig,
    },
    Rk {
        tableau: TableauSpec,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Fixed {
        periods: Vec<f64>,
        #[serde(rename = "T_max")]
        t_max: f64,
    },
    /// Periods uniform in `(0, T_max)`: `count` of them, or as many as fit
    /// in `horizon`.
    Random {
        #[serde(rename = "T_max")]
        t_max: f64,
        #[serde(default)]
        count: Option<usize>,
        #[serde(default)]
        horizon: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DisturbanceSpec {
    Zero,
    /// Independent draws, uniform in the ball of radius `E`.
    Uniform {
        #[serde(rename = "E")]
        e: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// The same vector at every step: `value`, or `E` along the first axis.
    Constant {
        #[serde(rename = "E", default)]
        e: Option<f64>,
        #[serde(default)]
        value: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_delta() -> f64 {
    0.5
}

fn default_eta() -> f64 {
    0.25
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self {
            delta: default_delta(),
            eta: default_eta(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovTask {
    pub spec: LyapunovSpecFile,
    #[serde(flatten)]
    pub params: LyapunovParams,
}

/// Settings of the cubic benchmark run.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleSpec {
    pub seed: u64,
    #[serde(rename = "T_max", default = "default_example_t_max")]
    pub t_max: f64,
    #[serde(default = "default_example_horizon")]
    pub horizon: f64,
    #[serde(default = "default_example_x0")]
    pub x0: f64,
    #[serde(rename = "E", default = "default_example_e")]
    pub e: f64,
    /// Trials used when fitting the ISS certificate of the exact model.
    #[serde(default = "default_example_trials")]
    pub trials: usize,
    #[serde(default = "default_example_dense")]
    pub dense_per_interval: usize,
    /// `eta` of the multistep comparison between the Euler and exact runs.
    #[serde(default = "default_example_eta")]
    pub eta: f64,
    /// Window of the multistep comparison.
    #[serde(default = "default_example_window")]
    pub window: f64,
}

fn default_example_t_max() -> f64 {
    0.01
}
fn default_example_horizon() -> f64 {
    6.0
}
fn default_example_x0() -> f64 {
    5.0
}
fn default_example_e() -> f64 {
    1.0
}
fn default_example_trials() -> usize {
    100
}
fn default_example_dense() -> usize {
    64
}
fn default_example_eta() -> f64 {
    0.1
}
fn default_example_window() -> f64 {
    3.0
}

impl ExampleSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            t_max: default_example_t_max(),
            horizon: default_example_horizon(),
            x0: default_example_x0(),
            e: default_example_e(),
            trials: default_example_trials(),
            dense_per_interval: default_example_dense(),
            eta: default_example_eta(),
            window: default_example_window(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn missing(what: &str) -> CliError {
    CliError::Config(format!("missing \"{what}\""))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    /// Checks everything `task` needs before any work starts: referenced
    /// files exist, required sections are present, and every random draw has
    /// a seed.
    pub fn validate(&self, task: Task) -> Result<()> {
        if let Some(t) = self.task {
            if t != task {
                return Err(CliError::Config(format!(
                    "config is for task `{}`, invoked as `{}`",
                    t.name(),
                    task.name()
                )));
            }
        }
        for (key, p) in [
            ("system", &self.system),
            ("certificate", &self.certificate),
            ("consistency_certificate", &self.consistency_certificate),
        ] {
            if let Some(p) = p {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(CliError::Config(format!("\"{key}\": no such file {}", full.display())));
                }
            }
        }
        if let Some(ScheduleSpec::Random { seed: None, .. }) = &self.schedule {
            return Err(CliError::Config("random schedule needs a \"seed\"".into()));
        }
        if let Some(DisturbanceSpec::Uniform { seed: None, .. }) = &self.disturbance {
            return Err(CliError::Config("uniform disturbance needs a \"seed\"".into()));
        }
        let need = |present: bool, what: &str| if present { Ok(()) } else { Err(missing(what)) };
        match task {
            Task::Simulate => {
                need(self.system.is_some(), "system")?;
                need(self.model.is_some(), "model")?;
                need(self.x0.is_some(), "x0")?;
                need(self.schedule.is_some(), "schedule")?;
            }
            Task::FitRepc => {
                need(self.system.is_some(), "system")?;
                need(self.model.is_some() && self.model_b.is_some(), "model and model_b")?;
                need(self.repc.is_some(), "repc")?;
            }
            Task::CheckRepmc => {
                need(self.system.is_some(), "system")?;
                need(self.model.is_some() && self.model_b.is_some(), "model and model_b")?;
                need(self.repmc.is_some(), "repmc")?;
                need(self.consistency_certificate.is_some(), "consistency_certificate")?;
            }
            Task::FitIss => {
                need(self.system.is_some(), "system")?;
                need(self.model.is_some(), "model")?;
                need(self.iss.is_some(), "iss")?;
            }
            Task::VerifyIss => {
                need(self.system.is_some(), "system")?;
                need(self.model.is_some(), "model")?;
                need(self.iss.is_some(), "iss")?;
                need(self.certificate.is_some(), "certificate")?;
            }
            Task::FindTstar => {
                need(self.system.is_some(), "system")?;
                need(self.model.is_some(), "model")?;
                need(self.tstar.is_some(), "tstar")?;
            }
            Task::Transfer => {
                need(self.certificate.is_some(), "certificate")?;
                need(self.consistency_certificate.is_some(), "consistency_certificate")?;
            }
            Task::CheckLyapunov => {
                need(self.system.is_some(), "system")?;
                need(self.model.is_some(), "model")?;
                need(self.lyapunov.is_some(), "lyapunov")?;
            }
            Task::Intersample => {
                need(self.system.is_some(), "system")?;
                need(matches!(self.model, Some(ModelSpec::Exact { .. })), "model with backend \"exact\"")?;
                need(self.certificate.is_some(), "certificate")?;
                need(self.x0.is_some(), "x0")?;
                need(self.schedule.is_some(), "schedule")?;
                need(self.intersample.is_some(), "intersample")?;
            }
            Task::ReproduceExample => need(self.example.is_some(), "example")?,
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_system(&self) -> Result<(ContinuousSystem, ControlLaw)> {
        let path = self.system.as_ref().ok_or_else(|| missing("system"))?;
        let file = SystemFile::load(&self.resolve(path))?;
        let sys = file.system()?;
        let law = file.law(&sys)?;
        Ok((sys, law))
    }
}

impl ModelSpec {
    pub fn build(&self, sys: &std::sync::Arc<ContinuousSystem>, law: &std::sync::Arc<ControlLaw>) -> Result<ClosedLoopModel> {
        let backend = match self {
            ModelSpec::Exact { oracle } => Backend::Exact(*oracle),
            ModelSpec::Rk { tableau } => Backend::RungeKutta(tableau.resolve()?),
        };
        Ok(ClosedLoopModel::new(backend, sys.clone(), law.clone())?)
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<SamplingSchedule> {
        Ok(match self {
            ScheduleSpec::Fixed { periods, t_max } => SamplingSchedule::new(periods.clone(), *t_max)?,
            ScheduleSpec::Random {
                t_max,
                count,
                horizon,
                seed,
            } => {
                let seed = seed.ok_or_else(|| CliError::Config("random schedule needs a \"seed\"".into()))?;
                let mut rng = stream_rng(seed, 0);
                match (count, horizon) {
                    (Some(c), None) => SamplingSchedule::random(&mut rng, *t_max, *c)?,
                    (None, Some(h)) => SamplingSchedule::random_until(&mut rng, *t_max, *h)?,
                    _ => {
                        return Err(CliError::Config(
                            "random schedule needs exactly one of \"count\" or \"horizon\"".into(),
                        ))
                    }
                }
            }
        })
    }
}

impl DisturbanceSpec {
    pub fn build(&self, len: usize, dim: usize) -> Result<DisturbanceSignal> {
        Ok(match self {
            DisturbanceSpec::Zero => DisturbanceSignal::zero(len, dim),
            DisturbanceSpec::Uniform { e, seed } => {
                let seed = seed.ok_or_else(|| CliError::Config("uniform disturbance needs a \"seed\"".into()))?;
                if !(*e >= 0.0) {
                    return Err(CliError::Config(format!("disturbance radius must be nonnegative, got {e}")));
                }
                DisturbanceSignal::uniform(&mut stream_rng(seed, 0), *e, len, dim)
            }
            DisturbanceSpec::Constant { e, value } => {
                let v = match (e, value) {
                    (Some(e), None) => {
                        let mut v = vec![0.0; dim];
                        if let Some(first) = v.first_mut() {
                            *first = *e;
                        }
                        v
                    }
                    (None, Some(v)) => v.clone(),
                    _ => {
                        return Err(CliError::Config(
                            "constant disturbance needs exactly one of \"E\" or \"value\"".into(),
                        ))
                    }
                };
                if v.len() != dim {
                    return Err(CliError::Config(format!(
                        "constant disturbance has length {}, law expects {dim}",
                        v.len()
                    )));
                }
                DisturbanceSignal::constant(&v, len)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("."))
    }

    #[test]
    fn random_schedule_without_seed_is_rejected() {
        let cfg = parse(r#"{"schedule": {"kind": "random", "T_max": 0.1, "count": 5}}"#).unwrap();
        let err = cfg.validate(Task::Transfer).unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("seed")), "{err}");
        assert!(cfg.schedule.unwrap().build().is_err());
    }

    #[test]
    fn uniform_disturbance_without_seed_is_rejected() {
        let cfg = parse(r#"{"disturbance": {"kind": "uniform", "E": 1.0}}"#).unwrap();
        assert!(matches!(cfg.validate(Task::Transfer), Err(CliError::Config(_))));
    }

    #[test]
    fn fitting_params_require_a_seed() {
        let err = parse(r#"{"iss": {"M": 1.0, "E": 0.0, "T_try": 0.1, "trials": 100}}"#).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_and_task_mismatch_are_rejected() {
        assert!(parse(r#"{"sytem": "a.json"}"#).is_err());
        let cfg = parse(r#"{"task": "fit-iss"}"#).unwrap();
        assert!(matches!(cfg.validate(Task::VerifyIss), Err(CliError::Config(_))));
    }

    #[test]
    fn missing_files_are_reported() {
        let cfg = parse(r#"{"system": "does/not/exist.json"}"#).unwrap();
        let err = cfg.validate(Task::Simulate).unwrap_err();
        assert!(err.to_string().contains("no such file"), "{err}");
    }

    #[test]
    fn schedules_and_disturbances_build() {
        let s = parse(r#"{"schedule": {"kind": "random", "T_max": 0.1, "count": 7, "seed": 3}}"#)
            .unwrap()
            .schedule
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(s.len(), 7);
        assert!(s.periods().iter().all(|&t| t > 0.0 && t < 0.1));
        let d = DisturbanceSpec::Constant { e: Some(0.5), value: None }.build(4, 2).unwrap();
        assert_eq!(d.values()[3], vec![0.5, 0.0]);
        let d = DisturbanceSpec::Uniform { e: 1.0, seed: Some(1) }.build(50, 1).unwrap();
        assert!(d.sup_norm() <= 1.0);
    }

    #[test]
    fn model_specs_parse() {
        let m: ModelSpec = serde_json::from_str(r#"{"backend": "rk", "tableau": "heun"}"#).unwrap();
        assert!(matches!(m, ModelSpec::Rk { .. }));
        let m: ModelSpec = serde_json::from_str(r#"{"backend": "exact", "oracle": {"abs_tol": 1e-9}}"#).unwrap();
        match m {
            ModelSpec::Exact { oracle } => {
                assert_eq!(oracle.abs_tol, 1e-9);
                assert_eq!(oracle.rel_tol, 1e-10);
            }
            _ => panic!("expected exact backend"),
        }
        let m: ModelSpec =
            serde_json::from_str(r#"{"backend": "rk", "tableau": {"s": 1, "a": [[0.0]], "b": [1.0]}}"#).unwrap();
        assert!(matches!(m, ModelSpec::Rk { .. }));
    }
}
