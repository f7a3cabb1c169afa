//! Lockstep interconnection of the plant and the optimization flow.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{HalfSpace, LocalProblem};
use crate::graph::Topology;
use crate::plant::{Plant, PlantError, PlantState};
use crate::solver::{kkt_residual, step_unchecked, SolverParams, SolverState};

use super::config::{ConfigError, ReferenceFusion, ScenarioConfig};
use super::log::{StepRecord, TrajectoryLog, LOG_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("optimization flow diverged at t = {time}")]
    Diverged { time: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feasibility {
    Ok,
    /// Multipliers exceeded the bound; the plant holds the last good reference.
    Infeasible,
}

/// The running closed loop. Owns every piece of mutable simulation state.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    config: ScenarioConfig,
    topology: Topology,
    plant: Plant,
    params: SolverParams,
    scene: Vec<HalfSpace>,
    problems: Vec<LocalProblem>,
    plant_state: PlantState,
    solver: SolverState,
    step: u64,
    total_steps: u64,
    operator_override: Option<Vector2<f64>>,
    raw: Vector2<f64>,
    applied: Vector2<f64>,
    last_good: Vector2<f64>,
    feasibility: Feasibility,
    worst_violation: f64,
    infeasible_steps: u64,
}

impl ClosedLoop {
    pub fn new(config: ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        let topology = config.topology()?;
        let plant = config.plant()?;
        let params = config.solver.params();
        let plant_state = config.initial_state();
        let raw = config.reference_at(0.0);
        let problems = config.build_problems(&plant_state, raw)?;
        let solver = SolverState::initial(&problems, config.solver.init);
        let total_steps = (config.duration / config.plant.dt).round() as u64;
        let mut sim = ClosedLoop {
            scene: config.scene_halfspaces(),
            config,
            topology,
            plant,
            params,
            problems,
            plant_state,
            solver,
            step: 0,
            total_steps,
            operator_override: None,
            raw,
            applied: Vector2::zeros(),
            last_good: Vector2::zeros(),
            feasibility: Feasibility::Ok,
            worst_violation: f64::NEG_INFINITY,
            infeasible_steps: 0,
        };
        sim.applied = sim.fused_estimate();
        sim.last_good = sim.applied;
        sim.worst_violation = sim.physical_violation();
        Ok(sim)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn problems(&self) -> &[LocalProblem] {
        &self.problems
    }

    pub fn plant_state(&self) -> &PlantState {
        &self.plant_state
    }

    pub fn solver_state(&self) -> &SolverState {
        &self.solver
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.plant.dt
    }

    pub fn raw_reference(&self) -> Vector2<f64> {
        self.raw
    }

    pub fn applied_reference(&self) -> Vector2<f64> {
        self.applied
    }

    pub fn feasibility(&self) -> Feasibility {
        self.feasibility
    }

    pub fn scene(&self) -> &[HalfSpace] {
        &self.scene
    }

    /// Largest `n·q_j - offset` over robots and scene half-spaces, seen at any
    /// step so far.
    pub fn worst_violation(&self) -> f64 {
        self.worst_violation
    }

    pub fn infeasible_steps(&self) -> u64 {
        self.infeasible_steps
    }

    /// Operator reference replacing the schedule from the next step on.
    pub fn set_reference(&mut self, r: Vector2<f64>) {
        self.operator_override = Some(r);
    }

    pub fn m_estimates(&self) -> Vec<Vector2<f64>> {
        (0..self.topology.n()).map(|i| self.solver.m_estimate(i)).collect()
    }

    fn fused_estimate(&self) -> Vector2<f64> {
        match self.config.solver.fusion {
            ReferenceFusion::LeaderMean => self.solver.mean_m(self.topology.leaders()),
            ReferenceFusion::FirstLeader => self.solver.m_estimate(self.topology.leaders()[0]),
        }
    }

    /// `max_{h,j} (n_h · q_j - offset_h)`; negative when every robot is safe.
    pub fn physical_violation(&self) -> f64 {
        physical_violation(&self.scene, &self.plant_state)
    }

    /// Per-agent `-max_k g_ik(z̃_i)`.
    pub fn certificate_margins(&self) -> Vec<f64> {
        self.problems
            .iter()
            .zip(&self.solver.z_tilde)
            .map(|(p, z)| {
                if p.num_inequalities() == 0 {
                    f64::INFINITY
                } else {
                    -p.eval_g(z).max()
                }
            })
            .collect()
    }

    pub fn record(&self) -> StepRecord {
        let n = self.topology.n();
        let m = DVector::from_iterator(
            2 * n,
            (0..n).flat_map(|i| {
                let v = self.solver.m_estimate(i);
                [v[0], v[1]]
            }),
        );
        StepRecord {
            time: self.time(),
            q: self.plant_state.q.iter().copied().collect(),
            xi: self.plant_state.xi.iter().copied().collect(),
            m: m.iter().copied().collect(),
            applied: [self.applied[0], self.applied[1]],
            raw: [self.raw[0], self.raw[1]],
            lambda_norm: self.solver.lambda_norm(),
            nu_norm: self.solver.nu_norm(),
            kkt: kkt_residual(&self.solver, &self.problems),
            consensus: self.solver.consensus_disagreement(&self.topology),
            feasible: self.feasibility == Feasibility::Ok,
            g_margin: self.certificate_margins(),
            safety_margin: -self.physical_violation(),
        }
    }

    /// One plant period: solver sub-steps with the current pins, fuse the
    /// leader estimates, then advance the plant.
    pub fn step(&mut self) -> Result<(), SimError> {
        let t = self.time();
        self.raw = self.operator_override.unwrap_or_else(|| self.config.reference_at(t));
        for (i, p) in self.problems.iter_mut().enumerate() {
            p.set_reference(self.raw);
            p.set_measurement(self.plant_state.position(i), self.plant_state.integral(i));
        }
        for _ in 0..self.config.solver.substeps {
            self.solver = step_unchecked(&self.solver, &self.problems, &self.topology, &self.params);
        }
        if !self.solver.is_finite() {
            return Err(SimError::Diverged { time: t });
        }
        if self.solver.lambda_norm_inf() > self.params.multiplier_bound {
            self.feasibility = Feasibility::Infeasible;
            self.infeasible_steps += 1;
            self.applied = self.last_good;
        } else {
            self.feasibility = Feasibility::Ok;
            self.applied = self.fused_estimate();
            self.last_good = self.applied;
        }
        self.plant_state = self.plant.step(&self.plant_state, &self.applied, t)?;
        self.step += 1;
        self.worst_violation = self.worst_violation.max(self.physical_violation());
        Ok(())
    }

    /// Restart from the configured initial condition, dropping any operator
    /// override.
    pub fn reset(&mut self) -> Result<(), SimError> {
        *self = ClosedLoop::new(self.config.clone())?;
        Ok(())
    }
}

pub fn physical_violation(scene: &[HalfSpace], state: &PlantState) -> f64 {
    let n = state.q.len() / 2;
    let mut worst = f64::NEG_INFINITY;
    for h in scene {
        for j in 0..n {
            worst = worst.max(-h.margin(&state.position(j)));
        }
    }
    worst
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub config_hash: String,
    pub steps: u64,
    pub final_time: f64,
    /// Worst half-space violation over every plant step (not only logged ones).
    pub worst_violation: f64,
    pub final_applied: [f64; 2],
    pub final_raw: [f64; 2],
    /// `max_i ‖q_i - (m + bias_i)‖` at the end.
    pub formation_error: f64,
    pub final_kkt: f64,
    pub final_consensus: f64,
    pub infeasible_steps: u64,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub log: TrajectoryLog,
    pub summary: RunSummary,
    pub final_loop: ClosedLoop,
}

/// Run a scenario to completion. Bit-for-bit deterministic in the config.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioRun, SimError> {
    let mut sim = ClosedLoop::new(config.clone())?;
    let every = config.log.every;
    let mut log = TrajectoryLog {
        schema_version: LOG_SCHEMA_VERSION,
        config_hash: config.hash(),
        n: sim.topology().n(),
        records: vec![sim.record()],
    };
    while !sim.finished() {
        sim.step()?;
        if sim.step_index() % every == 0 || sim.finished() {
            log.records.push(sim.record());
        }
    }
    let summary = summarize(&sim);
    Ok(ScenarioRun {
        log,
        summary,
        final_loop: sim,
    })
}

pub fn summarize(sim: &ClosedLoop) -> RunSummary {
    let m = sim.applied_reference();
    let target = sim.plant.formation_target(&m);
    let n = sim.topology().n();
    let formation_error = (0..n)
        .map(|i| {
            let d = sim.plant_state().position(i) - Vector2::new(target[2 * i], target[2 * i + 1]);
            d.norm()
        })
        .fold(0.0, f64::max);
    RunSummary {
        name: sim.config().name.clone(),
        config_hash: sim.config().hash(),
        steps: sim.step_index(),
        final_time: sim.time(),
        worst_violation: sim.worst_violation(),
        final_applied: [m[0], m[1]],
        final_raw: [sim.raw[0], sim.raw[1]],
        formation_error,
        final_kkt: kkt_residual(sim.solver_state(), sim.problems()),
        final_consensus: sim.solver_state().consensus_disagreement(sim.topology()),
        infeasible_steps: sim.infeasible_steps(),
    }
}
