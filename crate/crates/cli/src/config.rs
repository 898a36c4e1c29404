//! Task configuration files (TOML). Unknown keys are rejected.
//!
//! Units: lengths in m, masses in kg, angles in rad, stiffness in N m/rad,
//! motor inertia in kg m^2, time in s.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: invalid value for `{key}`: {message}")]
    Invalid {
        path: String,
        key: String,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Regulation,
    SwingUp,
    RigidVsSoft,
    DerivativeStudy,
    EnergyStudy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActuationKindConfig {
    Rigid,
    Sea,
    Vsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InertiaConfig {
    #[default]
    PointMass,
    Rod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<String>,
    pub chain: ChainConfig,
    pub actuation: ActuationConfig,
    pub horizon: Option<HorizonConfig>,
    pub initial: Option<InitialConfig>,
    pub target: Option<TargetConfig>,
    pub weights: Option<WeightsConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    pub perturbation: Option<PerturbationConfig>,
    pub study: Option<StudyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub masses: Vec<f64>,
    pub lengths: Vec<f64>,
    pub com_offsets: Vec<f64>,
    /// m/s^2 along -y.
    pub gravity: f64,
    /// Planar position of the first joint.
    pub base: Option<[f64; 2]>,
    #[serde(default)]
    pub inertia: InertiaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuationConfig {
    pub kind: ActuationKindConfig,
    /// Defaults to every joint.
    pub actuated: Option<Vec<usize>>,
    /// One per actuated joint.
    pub motor_inertia: Option<Vec<f64>>,
    /// SEA spring per actuated joint.
    pub stiffness: Option<Vec<f64>>,
    pub sigma_min: Option<Vec<f64>>,
    pub sigma_max: Option<Vec<f64>>,
    /// One per joint; used on unactuated joints.
    pub passive_stiffness: Option<Vec<f64>>,
    /// Defaults to `sigma_min`.
    pub sigma_ref: Option<Vec<f64>>,
    /// Stiffness of the initial control guess; defaults to `sigma_min`.
    pub sigma_init: Option<Vec<f64>>,
    /// Slope of the stiffness cost, N m per (N m/rad).
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub duration: f64,
    pub dt: f64,
}

impl HorizonConfig {
    pub fn knots(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub q: Vec<f64>,
    pub qdot: Option<Vec<f64>>,
    /// Defaults to the actuated link angles (relaxed springs).
    pub theta: Option<Vec<f64>>,
    pub thetadot: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// Tip position, m.
    pub position: Option<[f64; 2]>,
    /// Joint posture, rad; its tip position is tracked when `position` is absent.
    pub posture: Option<Vec<f64>>,
    /// Terminal tip velocity, m/s.
    pub velocity: Option<[f64; 2]>,
    /// Joint posture used as the state-regularization reference, rad.
    /// Defaults to `posture`, then to the initial state.
    pub rest_posture: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    #[serde(default)]
    pub control: f64,
    #[serde(default)]
    pub state: f64,
    /// Overrides `state` on velocity coordinates.
    pub state_velocity: Option<f64>,
    #[serde(default)]
    pub goal: f64,
    #[serde(default)]
    pub terminal_goal: f64,
    #[serde(default)]
    pub terminal_state: f64,
    #[serde(default)]
    pub terminal_velocity: f64,
    /// Weight of the VSA stiffness cost.
    #[serde(default)]
    pub stiffness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: Option<usize>,
    pub stop_tolerance: Option<f64>,
    pub gap_tolerance: Option<f64>,
    pub reg_init: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Number of seeded perturbed rollouts.
    pub trials: usize,
    /// Link masses are scaled by a factor drawn uniformly from this range.
    pub mass_scale: [f64; 2],
    #[serde(default)]
    pub torque_noise_std: f64,
    pub stiffness_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Derivative study: number of random configurations.
    pub samples: Option<usize>,
    /// Derivative study: evaluations per timing batch.
    pub timing_calls: Option<usize>,
    /// Rigid-vs-soft study: plant stiffness values.
    pub stiffness_sweep: Option<Vec<f64>>,
}

fn invalid(path: &str, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        key: key.to_string(),
        message: message.into(),
    }
}

impl TaskConfig {
    pub fn from_str(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: TaskConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: p.clone(),
            source,
        })?;
        Self::from_str(&text, &p)
    }

    pub fn n_links(&self) -> usize {
        self.chain.lengths.len()
    }

    pub fn actuated(&self) -> Vec<usize> {
        self.actuation
            .actuated
            .clone()
            .unwrap_or_else(|| (0..self.n_links()).collect())
    }

    pub fn horizon(&self) -> &HorizonConfig {
        self.horizon.as_ref().expect("validated horizon")
    }

    pub fn weights(&self) -> WeightsConfig {
        self.weights.clone().unwrap_or_default()
    }

    /// Semantic checks beyond the schema.
    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        let n = self.n_links();
        let c = &self.chain;
        if n == 0 {
            return Err(invalid(
                path,
                "chain.lengths",
                "at least one link is required",
            ));
        }
        if c.masses.len() != n {
            return Err(invalid(
                path,
                "chain.masses",
                format!("expected {n} entries"),
            ));
        }
        if c.com_offsets.len() != n {
            return Err(invalid(
                path,
                "chain.com_offsets",
                format!("expected {n} entries"),
            ));
        }
        let m = self.actuated().len();
        let a = &self.actuation;
        let check_len = |key: &str, v: &Option<Vec<f64>>, len: usize| match v {
            Some(v) if v.len() != len => Err(invalid(
                path,
                key,
                format!("expected {len} entries, got {}", v.len()),
            )),
            _ => Ok(()),
        };
        check_len("actuation.motor_inertia", &a.motor_inertia, m)?;
        check_len("actuation.stiffness", &a.stiffness, m)?;
        check_len("actuation.sigma_min", &a.sigma_min, m)?;
        check_len("actuation.sigma_max", &a.sigma_max, m)?;
        check_len("actuation.sigma_ref", &a.sigma_ref, m)?;
        check_len("actuation.sigma_init", &a.sigma_init, m)?;
        check_len("actuation.passive_stiffness", &a.passive_stiffness, n)?;

        let needs_sea = matches!(self.kind, TaskKind::EnergyStudy | TaskKind::DerivativeStudy)
            || a.kind == ActuationKindConfig::Sea;
        let needs_vsa = self.kind == TaskKind::EnergyStudy || a.kind == ActuationKindConfig::Vsa;
        if needs_sea && a.stiffness.is_none() && self.kind != TaskKind::DerivativeStudy {
            return Err(invalid(
                path,
                "actuation.stiffness",
                "missing for SEA actuation",
            ));
        }
        if needs_vsa && (a.sigma_min.is_none() || a.sigma_max.is_none()) {
            return Err(invalid(
                path,
                "actuation.sigma_min",
                "VSA actuation needs sigma_min and sigma_max",
            ));
        }
        if needs_vsa && a.lambda.is_none() {
            return Err(invalid(
                path,
                "actuation.lambda",
                "missing for VSA actuation",
            ));
        }

        match self.kind {
            TaskKind::DerivativeStudy => {
                if a.stiffness.is_none() && a.sigma_min.is_none() {
                    return Err(invalid(
                        path,
                        "actuation",
                        "derivative study needs SEA stiffness and/or VSA bounds",
                    ));
                }
            }
            _ => {
                let h = self
                    .horizon
                    .as_ref()
                    .ok_or_else(|| invalid(path, "horizon", "missing section"))?;
                if !(h.dt > 0.0) {
                    return Err(invalid(path, "horizon.dt", "must be > 0"));
                }
                if !(h.duration > 0.0) {
                    return Err(invalid(path, "horizon.duration", "must be > 0"));
                }
                let ratio = h.duration / h.dt;
                if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) || ratio.round() < 1.0 {
                    return Err(invalid(
                        path,
                        "horizon.duration",
                        "must be an integer multiple of dt",
                    ));
                }
                let init = self
                    .initial
                    .as_ref()
                    .ok_or_else(|| invalid(path, "initial", "missing section"))?;
                if init.q.len() != n {
                    return Err(invalid(path, "initial.q", format!("expected {n} entries")));
                }
                check_len("initial.qdot", &init.qdot, n)?;
                check_len("initial.theta", &init.theta, m)?;
                check_len("initial.thetadot", &init.thetadot, m)?;
                let t = self
                    .target
                    .as_ref()
                    .ok_or_else(|| invalid(path, "target", "missing section"))?;
                if t.position.is_none() && t.posture.is_none() {
                    return Err(invalid(path, "target", "needs `position` or `posture`"));
                }
                check_len("target.posture", &t.posture, n)?;
                check_len("target.rest_posture", &t.rest_posture, n)?;
                let w = self.weights();
                for (key, v) in [
                    ("weights.control", w.control),
                    ("weights.state", w.state),
                    ("weights.goal", w.goal),
                    ("weights.terminal_goal", w.terminal_goal),
                    ("weights.terminal_state", w.terminal_state),
                    ("weights.terminal_velocity", w.terminal_velocity),
                    ("weights.stiffness", w.stiffness),
                    ("weights.state_velocity", w.state_velocity.unwrap_or(0.0)),
                ] {
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(invalid(path, key, "weights must be >= 0"));
                    }
                }
            }
        }
        if self.kind == TaskKind::RigidVsSoft {
            let sweep = self
                .study
                .as_ref()
                .and_then(|s| s.stiffness_sweep.as_ref())
                .ok_or_else(|| {
                    invalid(path, "study.stiffness_sweep", "missing for rigid-vs-soft")
                })?;
            if sweep.is_empty() || sweep.iter().any(|s| !(*s > 0.0)) {
                return Err(invalid(path, "study.stiffness_sweep", "values must be > 0"));
            }
        }
        if let Some(p) = &self.perturbation {
            if !(p.mass_scale[0] > 0.0 && p.mass_scale[0] <= p.mass_scale[1]) {
                return Err(invalid(
                    path,
                    "perturbation.mass_scale",
                    "needs 0 < min <= max",
                ));
            }
            if !(p.torque_noise_std >= 0.0) {
                return Err(invalid(
                    path,
                    "perturbation.torque_noise_std",
                    "must be >= 0",
                ));
            }
        }
        Ok(())
    }
}
