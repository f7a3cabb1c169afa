use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netgov::oracle::{grid_project, recover_multipliers, OracleOptions};
use netgov::scenario::{builtin, run_scenario, verify_scenario, ClosedLoop, ConfigError, ScenarioConfig};
use netgov_teleop::{serve, Catalog, ServeOptions};
use serde_json::json;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "netgov", version, about = "Governed PI-consensus robot network simulator")]
struct Cli {
    /// Seed for randomized property tests; simulations are deterministic and ignore it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its trajectory log.
    Run {
        /// Scenario file, or the name of a built-in scenario.
        scenario: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Oracle projection of the operator reference at time `--at` of the closed loop.
    Oracle {
        scenario: String,
        #[arg(long)]
        at: f64,
    },
    /// Run the closed-loop acceptance checks for a scenario.
    Verify { scenario: String },
    /// Serve the live teleoperation protocol over TCP.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long, default_value = "ring5_inadmissible")]
        scenario: String,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
    Acceptance,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn load_scenario(arg: &str) -> Result<ScenarioConfig, Failure> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(cfg) = builtin::load(arg) {
            return Ok(cfg?);
        }
    }
    Ok(ScenarioConfig::load(path)?)
}

fn print_json(value: &serde_json::Value) {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    // a closed pipe on stdout is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn cmd_run(scenario: &str, out: &Path) -> Result<(), Failure> {
    let cfg = load_scenario(scenario)?;
    let run = run_scenario(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    let csv = run
        .log
        .write(out, &cfg.name, &cfg.name)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    print_json(&json!({
        "log": csv.display().to_string(),
        "records": run.log.records.len(),
        "summary": run.summary,
    }));
    Ok(())
}

fn cmd_oracle(scenario: &str, at: f64) -> Result<(), Failure> {
    let cfg = load_scenario(scenario)?;
    if !(at >= 0.0 && at <= cfg.duration) {
        return Err(Failure::Validation(format!(
            "--at must lie in [0, {}], got {at}",
            cfg.duration
        )));
    }
    let mut sim = ClosedLoop::new(cfg.clone()).map_err(|e| Failure::Validation(e.to_string()))?;
    let steps = (at / cfg.plant.dt).round() as u64;
    while sim.step_index() < steps {
        sim.step().map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let r = cfg.reference_at(sim.time());
    let problems = cfg.build_problems(sim.plant_state(), r)?;
    let mut result = grid_project(&r, sim.plant_state(), &problems, sim.scene(), &OracleOptions::default());
    result.multipliers = recover_multipliers(&result, sim.plant_state(), &problems);
    let applied = sim.applied_reference();
    print_json(&json!({
        "time": sim.time(),
        "raw_reference": [r[0], r[1]],
        "applied_reference": [applied[0], applied[1]],
        "oracle": result,
    }));
    Ok(())
}

fn cmd_verify(scenario: &str) -> Result<(), Failure> {
    let cfg = load_scenario(scenario)?;
    let report = verify_scenario(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Acceptance)
    }
}

fn cmd_serve(host: &str, port: u16, speed: f64, scenario: &str) -> Result<(), Failure> {
    if !(speed.is_finite() && speed > 0.0) {
        return Err(Failure::Validation(format!("--speed must be positive, got {speed}")));
    }
    let cfg = load_scenario(scenario)?;
    let mut catalog = Catalog::builtin();
    catalog.insert(cfg.clone());
    let options = ServeOptions {
        speed,
        ..Default::default()
    };
    let handle = serve(cfg, &format!("{host}:{port}"), options, catalog).map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!("listening on {}", handle.local_addr());
    handle.wait();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(seed) = cli.seed {
        log::info!("seed {seed} only affects randomized property tests");
    }
    let result = match &cli.command {
        Command::Run { scenario, out } => cmd_run(scenario, out),
        Command::Oracle { scenario, at } => cmd_oracle(scenario, *at),
        Command::Verify { scenario } => cmd_verify(scenario),
        Command::Serve {
            port,
            host,
            speed,
            scenario,
        } => cmd_serve(host, *port, *speed, scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Acceptance) => {
            eprintln!("acceptance checks failed");
            ExitCode::from(EXIT_ACCEPTANCE)
        }
    }
}
