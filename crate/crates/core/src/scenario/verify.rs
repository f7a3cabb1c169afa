//! Closed-loop acceptance checks for a single scenario.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::oracle::{grid_project, OracleOptions, OracleResult};

use super::config::ScenarioConfig;
use super::log::replay_check;
use super::sim::{run_scenario, ScenarioRun, SimError};

/// Largest tolerated half-space violation of any robot at any plant step.
pub const SAFETY_SLACK: f64 = 1e-6;
/// Governed reference vs. oracle projection at the final state, per coordinate.
pub const ORACLE_TOL: f64 = 1e-2;
/// Final distance of every robot from its formation target.
pub const FORMATION_TOL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub scenario: String,
    pub checks: Vec<Check>,
    pub oracle: OracleResult,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Oracle projection of the raw reference at the run's final state.
pub fn final_oracle(run: &ScenarioRun) -> OracleResult {
    let fl = &run.final_loop;
    grid_project(
        &fl.raw_reference(),
        fl.plant_state(),
        fl.problems(),
        fl.scene(),
        &OracleOptions::default(),
    )
}

/// Run `config`, then check safety, governed-reference admissibility, oracle
/// agreement, formation tracking and bit-exact replay.
pub fn verify_scenario(config: &ScenarioConfig) -> Result<VerifyReport, SimError> {
    let run = run_scenario(config)?;
    let s = &run.summary;
    let mut checks = Vec::new();

    checks.push(check(
        "safety",
        s.worst_violation <= SAFETY_SLACK,
        format!("worst half-space violation over all steps {:.3e}", s.worst_violation),
    ));

    let m = Vector2::new(s.final_applied[0], s.final_applied[1]);
    let fl = &run.final_loop;
    let bias = config.formation_bias_vector();
    let mut worst_target = f64::NEG_INFINITY;
    for &l in fl.topology().leaders() {
        let target = m + Vector2::new(bias[2 * l], bias[2 * l + 1]);
        for h in fl.scene() {
            worst_target = worst_target.max(-h.margin(&target));
        }
    }
    checks.push(check(
        "governed_reference_admissible",
        worst_target <= SAFETY_SLACK,
        format!("m = [{:.6}, {:.6}], worst leader-target violation {:.3e}", m[0], m[1], worst_target),
    ));

    let oracle = final_oracle(&run);
    let err = (m - oracle.m_star).abs().max();
    checks.push(check(
        "oracle_match",
        oracle.feasible && err <= ORACLE_TOL,
        format!(
            "oracle m* = [{:.6}, {:.6}], max coordinate error {:.3e}",
            oracle.m_star[0], oracle.m_star[1], err
        ),
    ));

    checks.push(check(
        "formation",
        s.formation_error <= FORMATION_TOL,
        format!("max distance to m + bias {:.3e}", s.formation_error),
    ));

    let replay = replay_check(&run.log, config);
    checks.push(check(
        "replay",
        replay.is_ok(),
        match &replay {
            Ok(()) => format!("{} records bit-identical", run.log.records.len()),
            Err(e) => e.to_string(),
        },
    ));

    Ok(VerifyReport {
        scenario: config.name.clone(),
        checks,
        oracle,
    })
}
