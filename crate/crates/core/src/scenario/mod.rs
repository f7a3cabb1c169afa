//! Scenario files, the closed loop, trajectory logs and acceptance checks.

pub mod builtin;
pub mod config;
pub mod log;
pub mod sim;
pub mod verify;

pub use config::{ConfigError, ScenarioConfig};
pub use log::{replay_check, ReplayError, StepRecord, TrajectoryLog};
pub use sim::{run_scenario, ClosedLoop, Feasibility, RunSummary, ScenarioRun, SimError};
pub use verify::{verify_scenario, VerifyReport};
