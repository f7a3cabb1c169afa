//! Scenario files (TOML) and assembly of the plant and per-agent problems.

use std::path::Path;

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constraints::{ConstraintError, HalfSpace, InputPolytope, LocalConstraintSet, LocalProblem};
use crate::graph::{GraphError, Topology, TopologySpec};
use crate::plant::{Plant, PlantError, PlantParams, PlantState};
use crate::solver::{InitMode, SolverError, SolverParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid topology: {0}")]
    Graph(#[from] GraphError),
    #[error("invalid constraint: {0}")]
    Constraint(#[from] ConstraintError),
    #[error("invalid plant: {0}")]
    Plant(#[from] PlantError),
    #[error("invalid solver settings: {0}")]
    Solver(#[from] SolverError),
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub alpha_r: f64,
    pub dt: f64,
}

/// How the leaders' `m`-estimates become the single plant reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceFusion {
    #[default]
    LeaderMean,
    FirstLeader,
}

fn default_substeps() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub alpha: f64,
    /// Defaults to `1e-3 / alpha`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_substeps")]
    pub substeps: u32,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub fusion: ReferenceFusion,
    #[serde(default)]
    pub tol_consensus: Option<f64>,
    #[serde(default)]
    pub tol_kkt: Option<f64>,
    #[serde(default)]
    pub max_time: Option<f64>,
    #[serde(default)]
    pub multiplier_bound: Option<f64>,
}

impl SolverConfig {
    pub fn params(&self) -> SolverParams {
        let base = SolverParams::with_alpha(self.alpha);
        SolverParams {
            dt_solver: self.dt.unwrap_or(base.dt_solver),
            tol_consensus: self.tol_consensus.unwrap_or(base.tol_consensus),
            tol_kkt: self.tol_kkt.unwrap_or(base.tol_kkt),
            max_time: self.max_time.unwrap_or(base.max_time),
            multiplier_bound: self.multiplier_bound.unwrap_or(base.multiplier_bound),
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub q: Vec<[f64; 2]>,
    #[serde(default)]
    pub xi: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensedHalfSpace {
    pub normal: [f64; 2],
    pub offset: f64,
    /// Agents that detect this half-space. Empty means every agent.
    #[serde(default)]
    pub sensed_by: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPolytope {
    pub agent: usize,
    pub a: Vec<[f64; 2]>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSegment {
    pub start: f64,
    pub r: [f64; 2],
}

fn default_log_every() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogConfig {
    /// Record every this many plant steps (the final step is always recorded).
    #[serde(default = "default_log_every")]
    pub every: u64,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig { every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub duration: f64,
    /// Centre the invariance balls on the formation `1⊗m + bias` instead of
    /// `1⊗m`.
    #[serde(default)]
    pub bias_aware_constraints: bool,
    pub topology: TopologySpec,
    pub formation_bias: Vec<[f64; 2]>,
    pub initial: InitialState,
    pub plant: PlantConfig,
    pub solver: SolverConfig,
    #[serde(default, rename = "halfspace")]
    pub halfspaces: Vec<SensedHalfSpace>,
    #[serde(default, rename = "input_polytope")]
    pub input_polytopes: Vec<AgentPolytope>,
    pub reference: Vec<ReferenceSegment>,
    #[serde(default)]
    pub log: LogConfig,
}

fn stack(pairs: &[[f64; 2]]) -> DVector<f64> {
    DVector::from_iterator(2 * pairs.len(), pairs.iter().flat_map(|p| p.iter().copied()))
}

fn finite(values: impl IntoIterator<Item = f64>) -> bool {
    values.into_iter().all(f64::is_finite)
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config is always representable")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("scenario config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn topology(&self) -> Result<Topology, ConfigError> {
        Ok(Topology::try_from(self.topology.clone())?)
    }

    pub fn n(&self) -> usize {
        self.topology.adjacency.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let topology = self.topology()?;
        let n = topology.n();
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return invalid(format!("duration must be finite and nonnegative, got {}", self.duration));
        }
        if self.formation_bias.len() != n {
            return invalid(format!("formation_bias has {} entries, expected {n}", self.formation_bias.len()));
        }
        if self.initial.q.len() != n {
            return invalid(format!("initial.q has {} entries, expected {n}", self.initial.q.len()));
        }
        if let Some(xi) = &self.initial.xi {
            if xi.len() != n {
                return invalid(format!("initial.xi has {} entries, expected {n}", xi.len()));
            }
        }
        let all_pairs = self
            .formation_bias
            .iter()
            .chain(&self.initial.q)
            .chain(self.initial.xi.iter().flatten());
        if !finite(all_pairs.flat_map(|p| p.iter().copied())) {
            return invalid("non-finite bias or initial state");
        }
        self.plant()?;
        if self.solver.substeps == 0 {
            return invalid("solver.substeps must be at least 1");
        }
        self.solver.params().validate()?;

        for (k, h) in self.halfspaces.iter().enumerate() {
            HalfSpace::new(h.normal, h.offset)?;
            if let Some(&bad) = h.sensed_by.iter().find(|&&a| a >= n) {
                return invalid(format!("halfspace {k}: sensing agent {bad} out of range"));
            }
        }
        let mut seen = vec![false; n];
        for p in &self.input_polytopes {
            if p.agent >= n {
                return invalid(format!("input polytope agent {} out of range", p.agent));
            }
            if std::mem::replace(&mut seen[p.agent], true) {
                return invalid(format!("agent {} has more than one input polytope", p.agent));
            }
            InputPolytope {
                a: p.a.clone(),
                b: p.b.clone(),
            }
            .validate()?;
        }

        let segs = &self.reference;
        if segs.is_empty() || segs[0].start != 0.0 {
            return invalid("reference schedule must start at t = 0");
        }
        for w in segs.windows(2) {
            if !(w[1].start > w[0].start) {
                return invalid("reference segment starts must be strictly increasing");
            }
        }
        if !finite(segs.iter().flat_map(|s| [s.start, s.r[0], s.r[1]])) {
            return invalid("non-finite reference schedule");
        }
        if self.log.every == 0 {
            return invalid("log.every must be at least 1");
        }
        Ok(())
    }

    pub fn plant_params(&self) -> Result<PlantParams, ConfigError> {
        Ok(PlantParams {
            alpha_r: self.plant.alpha_r,
            formation_bias: self.formation_bias_vector(),
            dt: self.plant.dt,
        })
    }

    pub fn plant(&self) -> Result<Plant, ConfigError> {
        Ok(Plant::new(self.topology()?, self.plant_params()?)?)
    }

    pub fn formation_bias_vector(&self) -> DVector<f64> {
        stack(&self.formation_bias)
    }

    pub fn initial_state(&self) -> PlantState {
        let n = self.n();
        let xi = match &self.initial.xi {
            Some(xi) => stack(xi),
            None => DVector::zeros(2 * n),
        };
        PlantState::new(stack(&self.initial.q), xi)
    }

    /// Operator reference in force at time `t`.
    pub fn reference_at(&self, t: f64) -> Vector2<f64> {
        let seg = self
            .reference
            .iter()
            .rev()
            .find(|s| s.start <= t)
            .unwrap_or(&self.reference[0]);
        Vector2::new(seg.r[0], seg.r[1])
    }

    /// Half-spaces detected by `agent`.
    pub fn sensed_by(&self, agent: usize) -> Vec<HalfSpace> {
        self.halfspaces
            .iter()
            .filter(|h| h.sensed_by.is_empty() || h.sensed_by.contains(&agent))
            .map(|h| HalfSpace {
                normal: h.normal,
                offset: h.offset,
            })
            .collect()
    }

    /// Every distinct half-space in the scene.
    pub fn scene_halfspaces(&self) -> Vec<HalfSpace> {
        self.halfspaces
            .iter()
            .map(|h| HalfSpace {
                normal: h.normal,
                offset: h.offset,
            })
            .collect()
    }

    pub fn polytope_for(&self, agent: usize) -> Option<InputPolytope> {
        self.input_polytopes
            .iter()
            .find(|p| p.agent == agent)
            .map(|p| InputPolytope {
                a: p.a.clone(),
                b: p.b.clone(),
            })
    }

    /// Per-agent problems with the pins at `state` and reference `r`.
    pub fn build_problems(&self, state: &PlantState, r: Vector2<f64>) -> Result<Vec<LocalProblem>, ConfigError> {
        let topology = self.topology()?;
        let n = topology.n();
        let bias = self.formation_bias_vector();
        let center = self.bias_aware_constraints.then(|| bias.clone());
        (0..n)
            .map(|i| {
                let polytope = self.polytope_for(i);
                let set = LocalConstraintSet::assemble(
                    &self.sensed_by(i),
                    polytope.as_ref(),
                    i,
                    &topology,
                    self.plant.alpha_r,
                    &bias,
                )?;
                Ok(LocalProblem::new(
                    i,
                    topology.is_leader(i),
                    r,
                    set,
                    state.position(i),
                    state.integral(i),
                    n,
                    center.clone(),
                )?)
            })
            .collect()
    }
}
