//! Trajectory logs: in-memory records, CSV files with a JSON sidecar, and
//! bit-exact replay.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ScenarioConfig;
use super::sim::{ClosedLoop, SimError};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: f64,
    pub q: Vec<f64>,
    pub xi: Vec<f64>,
    /// Per-agent `m`-estimates, stacked.
    pub m: Vec<f64>,
    pub applied: [f64; 2],
    pub raw: [f64; 2],
    pub lambda_norm: f64,
    pub nu_norm: f64,
    pub kkt: f64,
    pub consensus: f64,
    pub feasible: bool,
    /// Per-agent `-max g_i(z̃_i)`.
    pub g_margin: Vec<f64>,
    /// `min_{h,j} (offset_h - n_h · q_j)`.
    pub safety_margin: f64,
}

impl StepRecord {
    fn fields(&self) -> Vec<f64> {
        let mut v = vec![self.time];
        v.extend(&self.q);
        v.extend(&self.xi);
        v.extend(&self.m);
        v.extend(self.applied);
        v.extend(self.raw);
        v.extend([self.lambda_norm, self.nu_norm, self.kkt, self.consensus]);
        v.push(if self.feasible { 1.0 } else { 0.0 });
        v.extend(&self.g_margin);
        v.push(self.safety_margin);
        v
    }

    fn from_fields(n: usize, v: &[f64]) -> Option<Self> {
        if v.len() != columns(n).len() {
            return None;
        }
        let mut it = v.iter().copied();
        let mut take = |k: usize| -> Vec<f64> { (&mut it).take(k).collect() };
        let time = take(1)[0];
        let q = take(2 * n);
        let xi = take(2 * n);
        let m = take(2 * n);
        let a = take(2);
        let r = take(2);
        let s = take(5);
        let g_margin = take(n);
        let safety = take(1)[0];
        Some(StepRecord {
            time,
            q,
            xi,
            m,
            applied: [a[0], a[1]],
            raw: [r[0], r[1]],
            lambda_norm: s[0],
            nu_norm: s[1],
            kkt: s[2],
            consensus: s[3],
            feasible: s[4] != 0.0,
            g_margin,
            safety_margin: safety,
        })
    }

    /// Field-wise comparison on the bit patterns.
    pub fn bit_eq(&self, other: &StepRecord) -> bool {
        let (a, b) = (self.fields(), other.fields());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// CSV header for `n` agents.
pub fn columns(n: usize) -> Vec<String> {
    let mut c = vec!["time".to_string()];
    for prefix in ["q", "xi", "m"] {
        for i in 0..n {
            c.push(format!("{prefix}{i}_x"));
            c.push(format!("{prefix}{i}_y"));
        }
    }
    for name in [
        "applied_x",
        "applied_y",
        "raw_x",
        "raw_y",
        "lambda_norm",
        "nu_norm",
        "kkt",
        "consensus",
        "feasible",
    ] {
        c.push(name.to_string());
    }
    for i in 0..n {
        c.push(format!("g_margin{i}"));
    }
    c.push("safety_margin".to_string());
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub schema_version: u32,
    pub config_hash: String,
    pub n: usize,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema_version: u32,
    pub scenario: String,
    pub config_hash: String,
    pub n: usize,
    pub records: usize,
    pub columns: Vec<String>,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed log: {0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl TrajectoryLog {
    /// Writes `<stem>.csv` and `<stem>.json` into `dir`; returns the CSV path.
    pub fn write(&self, dir: &Path, stem: &str, scenario: &str) -> Result<PathBuf, LogError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv = dir.join(format!("{stem}.csv"));
        let file = std::fs::File::create(&csv).map_err(io_err(&csv))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", columns(self.n).join(",")).map_err(io_err(&csv))?;
        let mut line = String::new();
        for rec in &self.records {
            line.clear();
            for (k, v) in rec.fields().iter().enumerate() {
                if k > 0 {
                    line.push(',');
                }
                // shortest round-trip representation
                write!(line, "{v:?}").unwrap();
            }
            writeln!(w, "{line}").map_err(io_err(&csv))?;
        }
        w.flush().map_err(io_err(&csv))?;

        let json = dir.join(format!("{stem}.json"));
        let sidecar = Sidecar {
            schema_version: self.schema_version,
            scenario: scenario.to_string(),
            config_hash: self.config_hash.clone(),
            n: self.n,
            records: self.records.len(),
            columns: columns(self.n),
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&json, text).map_err(io_err(&json))?;
        Ok(csv)
    }

    /// Reads a CSV written by [`TrajectoryLog::write`] plus its sidecar.
    pub fn read(csv: &Path) -> Result<Self, LogError> {
        let json = csv.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(io_err(&json))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| LogError::Format(e.to_string()))?;
        let file = std::fs::File::open(csv).map_err(io_err(csv))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| LogError::Format("empty file".into()))?
            .map_err(io_err(csv))?;
        if header.split(',').collect::<Vec<_>>() != columns(sidecar.n) {
            return Err(LogError::Format("header does not match the sidecar".into()));
        }
        let mut records = Vec::with_capacity(sidecar.records);
        for (k, line) in lines.enumerate() {
            let line = line.map_err(io_err(csv))?;
            let values: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            let values = values.map_err(|e| LogError::Format(format!("record {k}: {e}")))?;
            let rec = StepRecord::from_fields(sidecar.n, &values)
                .ok_or_else(|| LogError::Format(format!("record {k}: wrong column count")))?;
            records.push(rec);
        }
        Ok(TrajectoryLog {
            schema_version: sidecar.schema_version,
            config_hash: sidecar.config_hash,
            n: sidecar.n,
            records,
        })
    }

    pub fn timestamps_increasing(&self) -> bool {
        self.records.windows(2).all(|w| w[1].time > w[0].time)
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log was produced by a different config (hash {log} vs {config})")]
    ConfigHash { log: String, config: String },
    #[error("replay diverges at record {index}")]
    Mismatch { index: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Re-simulate `config` and compare every logged record bit-exactly.
pub fn replay_check(log: &TrajectoryLog, config: &ScenarioConfig) -> Result<(), ReplayError> {
    let hash = config.hash();
    if log.config_hash != hash {
        return Err(ReplayError::ConfigHash {
            log: log.config_hash.clone(),
            config: hash,
        });
    }
    let mut sim = ClosedLoop::new(config.clone())?;
    let every = config.log.every;
    let mut index = 0;
    let check = |sim: &ClosedLoop, index: &mut usize| -> Result<(), ReplayError> {
        match log.records.get(*index) {
            Some(rec) if rec.bit_eq(&sim.record()) => {
                *index += 1;
                Ok(())
            }
            _ => Err(ReplayError::Mismatch { index: *index }),
        }
    };
    check(&sim, &mut index)?;
    while !sim.finished() {
        sim.step()?;
        if sim.step_index() % every == 0 || sim.finished() {
            check(&sim, &mut index)?;
        }
    }
    if index != log.records.len() {
        return Err(ReplayError::Mismatch { index });
    }
    Ok(())
}
