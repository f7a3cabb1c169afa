//! PI-consensus pre-stabilized robot network.
//!
//! Single-integrator robots `q̇_i = u_i` in the plane, coupled through a
//! proportional-integral consensus estimator, with the leaders pulled towards
//! the (governed) reference. Formation offsets act as a coordinate shift: the
//! consensus terms see `q - bias`, so with zero bias the dynamics are
//!
//! ```text
//! q̇ = -L̄ q + L̄ ξ + (D ⊗ I₂) α_r ((1 ⊗ I₂) r - q)
//! ξ̇ = -L̄ q
//! ```
//!
//! and with bias `b` the same system holds for `p = q - b`.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{apply_lifted, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("{what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid plant parameter: {0}")]
    InvalidParams(String),
    #[error("integration blew up (non-finite state) at t = {time}")]
    Blowup { time: f64 },
}

/// Stacked positions `q` and integral states `ξ`, `2n` entries each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub q: DVector<f64>,
    pub xi: DVector<f64>,
}

impl PlantState {
    pub fn new(q: DVector<f64>, xi: DVector<f64>) -> Self {
        PlantState { q, xi }
    }

    pub fn zeros(n: usize) -> Self {
        PlantState {
            q: DVector::zeros(2 * n),
            xi: DVector::zeros(2 * n),
        }
    }

    pub fn position(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.q[2 * i], self.q[2 * i + 1])
    }

    pub fn integral(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.xi[2 * i], self.xi[2 * i + 1])
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.xi.iter()).all(|v| v.is_finite())
    }

    fn axpy(&self, h: f64, d: &PlantState) -> PlantState {
        PlantState {
            q: &self.q + &d.q * h,
            xi: &self.xi + &d.xi * h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub alpha_r: f64,
    /// Per-agent offset from the leader reference, stacked `2n`.
    pub formation_bias: DVector<f64>,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct Plant {
    topology: Topology,
    params: PlantParams,
}

impl Plant {
    pub fn new(topology: Topology, params: PlantParams) -> Result<Self, PlantError> {
        if !(params.alpha_r > 0.0 && params.alpha_r.is_finite()) {
            return Err(PlantError::InvalidParams(format!(
                "alpha_r must be positive, got {}",
                params.alpha_r
            )));
        }
        if !(params.dt > 0.0 && params.dt.is_finite()) {
            return Err(PlantError::InvalidParams(format!(
                "dt must be positive, got {}",
                params.dt
            )));
        }
        check_len("formation_bias", &params.formation_bias, 2 * topology.n())?;
        if params.formation_bias.iter().any(|v| !v.is_finite()) {
            return Err(PlantError::InvalidParams("formation_bias must be finite".into()));
        }
        Ok(Plant { topology, params })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.topology.n()
    }

    fn check_state(&self, state: &PlantState) -> Result<(), PlantError> {
        check_len("q", &state.q, 2 * self.n())?;
        check_len("xi", &state.xi, 2 * self.n())
    }

    /// Right-hand side `(q̇, ξ̇)` for a constant reference.
    pub fn derivative(
        &self,
        state: &PlantState,
        reference: &Vector2<f64>,
    ) -> Result<PlantState, PlantError> {
        self.check_state(state)?;
        Ok(self.derivative_unchecked(state, reference))
    }

    fn derivative_unchecked(&self, state: &PlantState, reference: &Vector2<f64>) -> PlantState {
        let n = self.n();
        let bias = &self.params.formation_bias;
        let shifted = &state.q - bias;
        let mut lp = vec![0.0; 2 * n];
        let mut lxi = vec![0.0; 2 * n];
        apply_lifted(&self.topology, shifted.as_slice(), 2, &mut lp);
        apply_lifted(&self.topology, state.xi.as_slice(), 2, &mut lxi);

        let mut dq = DVector::zeros(2 * n);
        let mut dxi = DVector::zeros(2 * n);
        let delta = self.topology.delta();
        for i in 0..n {
            for k in 0..2 {
                let idx = 2 * i + k;
                let track = delta[i]
                    * self.params.alpha_r
                    * (reference[k] + bias[idx] - state.q[idx]);
                dq[idx] = -lp[idx] + lxi[idx] + track;
                dxi[idx] = -lp[idx];
            }
        }
        PlantState { q: dq, xi: dxi }
    }

    /// Velocity input `u_i` applied to robot `i`.
    pub fn input(
        &self,
        state: &PlantState,
        reference: &Vector2<f64>,
        agent: usize,
    ) -> Result<Vector2<f64>, PlantError> {
        self.check_state(state)?;
        if agent >= self.n() {
            return Err(PlantError::InvalidParams(format!(
                "agent {agent} out of range"
            )));
        }
        let d = self.derivative_unchecked(state, reference);
        Ok(Vector2::new(d.q[2 * agent], d.q[2 * agent + 1]))
    }

    /// One RK4 step of length `dt` with the reference held constant.
    /// `time` is the start of the step and only used for error reporting.
    pub fn step(
        &self,
        state: &PlantState,
        reference: &Vector2<f64>,
        time: f64,
    ) -> Result<PlantState, PlantError> {
        self.check_state(state)?;
        let h = self.params.dt;
        let k1 = self.derivative_unchecked(state, reference);
        let k2 = self.derivative_unchecked(&state.axpy(0.5 * h, &k1), reference);
        let k3 = self.derivative_unchecked(&state.axpy(0.5 * h, &k2), reference);
        let k4 = self.derivative_unchecked(&state.axpy(h, &k3), reference);
        let next = PlantState {
            q: &state.q + (&k1.q + &k2.q * 2.0 + &k3.q * 2.0 + &k4.q) * (h / 6.0),
            xi: &state.xi + (&k1.xi + &k2.xi * 2.0 + &k3.xi * 2.0 + &k4.xi) * (h / 6.0),
        };
        if !next.is_finite() {
            return Err(PlantError::Blowup { time: time + h });
        }
        Ok(next)
    }

    /// Positions the robots settle at for a constant reference: `1 ⊗ r + bias`.
    pub fn formation_target(&self, reference: &Vector2<f64>) -> DVector<f64> {
        let n = self.n();
        DVector::from_fn(2 * n, |idx, _| reference[idx % 2]) + &self.params.formation_bias
    }

    /// `V = ½‖q - bias - 1⊗r‖² + ½‖ξ‖²`, non-increasing for a constant reference.
    pub fn storage(&self, state: &PlantState, reference: &Vector2<f64>) -> f64 {
        let e = &state.q - self.formation_target(reference);
        0.5 * e.norm_squared() + 0.5 * state.xi.norm_squared()
    }
}

fn check_len(what: &'static str, v: &DVector<f64>, expected: usize) -> Result<(), PlantError> {
    if v.len() != expected {
        return Err(PlantError::Dimension {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}
