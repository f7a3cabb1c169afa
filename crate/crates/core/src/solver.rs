//! Passivity-based distributed primal-dual flow.
//!
//! Every agent keeps an estimate `z̃_i` of the optimum of the decomposed
//! problem, a PI-consensus integral state `ζ_i`, and its own multipliers
//! `λ_i ≥ 0` (inequalities) and `ν_i` (pins). The continuous-time flow is
//!
//! ```text
//! ż̃_i = -(L z̃)_i + (L ζ)_i - α (∇f_i + ∇g_iᵀ λ_i + ∇h_iᵀ ν_i)   at z̃_i
//! ζ̇_i = -(L z̃)_i
//! λ̇_ik = η(λ_ik, g_ik(z̃_i)),    η = 0 if λ = 0 and g < 0, else g
//! ν̇_i = h_i(z̃_i)
//! ```
//!
//! with `L` acting block-wise (`L ⊗ I_{4n+2}`). Time is discretized with
//! explicit Euler followed by the projection `λ ← max(λ, 0)`.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::LocalProblem;
use crate::graph::{build_laplacian, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("expected {expected} local problems, got {got}")]
    ProblemCount { expected: usize, got: usize },
    #[error("problem for agent {agent} has network size {got}, topology has {expected}")]
    ProblemSize {
        agent: usize,
        expected: usize,
        got: usize,
    },
    #[error("solver state does not match the problems: {0}")]
    StateShape(String),
    #[error("invalid solver parameter: {0}")]
    InvalidParams(String),
    #[error("initial multipliers must be nonnegative")]
    NegativeMultiplier,
    #[error("optimization flow diverged (non-finite state) after {steps} steps")]
    Diverged { steps: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub alpha: f64,
    pub dt_solver: f64,
    pub tol_consensus: f64,
    pub tol_kkt: f64,
    /// Simulated-time budget for [`static_solve`].
    pub max_time: f64,
    /// `‖λ‖_∞` above this is reported as probable infeasibility.
    pub multiplier_bound: f64,
    /// Steps between convergence checks in [`static_solve`].
    pub check_every: u64,
}

impl SolverParams {
    pub fn with_alpha(alpha: f64) -> Self {
        SolverParams {
            alpha,
            dt_solver: 1e-3 / alpha,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.alpha) {
            return Err(SolverError::InvalidParams(format!("alpha = {}", self.alpha)));
        }
        if !positive(self.dt_solver) {
            return Err(SolverError::InvalidParams(format!("dt_solver = {}", self.dt_solver)));
        }
        if !positive(self.tol_consensus) || !positive(self.tol_kkt) {
            return Err(SolverError::InvalidParams("tolerances must be positive".into()));
        }
        if !(self.max_time >= 0.0) || !positive(self.multiplier_bound) || self.check_every == 0 {
            return Err(SolverError::InvalidParams(
                "max_time, multiplier_bound and check_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            alpha: 2.0,
            dt_solver: 5e-4,
            tol_consensus: 1e-5,
            tol_kkt: 1e-4,
            max_time: 1000.0,
            multiplier_bound: 1e6,
            check_every: 200,
        }
    }
}

/// How the estimates start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Everything at zero.
    #[default]
    Zeros,
    /// `m`-block at the agent's own position, own pins at the measurement,
    /// everything else zero.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub z_tilde: Vec<DVector<f64>>,
    pub zeta: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub nu: Vec<DVector<f64>>,
}

impl SolverState {
    pub fn initial(problems: &[LocalProblem], mode: InitMode) -> Self {
        let mut s = SolverState {
            z_tilde: problems.iter().map(|p| DVector::zeros(p.dim())).collect(),
            zeta: problems.iter().map(|p| DVector::zeros(p.dim())).collect(),
            lambda: problems
                .iter()
                .map(|p| DVector::zeros(p.num_inequalities()))
                .collect(),
            nu: problems
                .iter()
                .map(|p| DVector::zeros(p.num_equalities()))
                .collect(),
        };
        if mode == InitMode::Measured {
            for (z, p) in s.z_tilde.iter_mut().zip(problems) {
                let (q, xi) = p.pins();
                let (qi, xii) = p.pin_indices();
                z[0] = q[0];
                z[1] = q[1];
                z[qi] = q[0];
                z[qi + 1] = q[1];
                z[xii] = xi[0];
                z[xii + 1] = xi[1];
            }
        }
        s
    }

    pub fn n(&self) -> usize {
        self.z_tilde.len()
    }

    pub fn m_estimate(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.z_tilde[i][0], self.z_tilde[i][1])
    }

    /// Mean of the estimates, `z̄`.
    pub fn mean_estimate(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.z_tilde[0].len());
        for z in &self.z_tilde {
            acc += z;
        }
        acc / self.n() as f64
    }

    /// Mean `m`-block over the given agents.
    pub fn mean_m(&self, agents: &[usize]) -> Vector2<f64> {
        let mut acc = Vector2::zeros();
        for &i in agents {
            acc += self.m_estimate(i);
        }
        acc / agents.len() as f64
    }

    /// `max_{(i,j) ∈ E} ‖z̃_i - z̃_j‖`.
    pub fn consensus_disagreement(&self, topology: &Topology) -> f64 {
        topology
            .edges()
            .map(|(i, j)| (&self.z_tilde[i] - &self.z_tilde[j]).norm())
            .fold(0.0, f64::max)
    }

    /// `Σ_{(i,j) ∈ E} ‖z̃_i - z̃_j‖²`.
    pub fn edge_disagreement_sq(&self, topology: &Topology) -> f64 {
        topology
            .edges()
            .map(|(i, j)| (&self.z_tilde[i] - &self.z_tilde[j]).norm_squared())
            .sum()
    }

    pub fn lambda_norm_inf(&self) -> f64 {
        self.lambda
            .iter()
            .flat_map(|l| l.iter())
            .fold(0.0, |a, &v| a.max(v.abs()))
    }

    pub fn nu_norm(&self) -> f64 {
        self.nu.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn lambda_norm(&self) -> f64 {
        self.lambda.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        [&self.z_tilde, &self.zeta, &self.lambda, &self.nu]
            .iter()
            .all(|blocks| blocks.iter().all(|b| b.iter().all(|v| v.is_finite())))
    }

    fn check(&self, problems: &[LocalProblem]) -> Result<(), SolverError> {
        let n = problems.len();
        if self.z_tilde.len() != n || self.zeta.len() != n || self.lambda.len() != n || self.nu.len() != n {
            return Err(SolverError::StateShape(format!("expected {n} agent blocks")));
        }
        for (i, p) in problems.iter().enumerate() {
            if self.z_tilde[i].len() != p.dim()
                || self.zeta[i].len() != p.dim()
                || self.lambda[i].len() != p.num_inequalities()
                || self.nu[i].len() != p.num_equalities()
            {
                return Err(SolverError::StateShape(format!("agent {i} block sizes")));
            }
        }
        Ok(())
    }
}

/// `(ż̃, ζ̇)` per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDerivative {
    pub z_tilde: Vec<DVector<f64>>,
    pub zeta: Vec<DVector<f64>>,
}

/// Multiplier switch: stays at zero while the constraint is strictly inactive.
pub fn switch_eta(lambda: f64, g: f64) -> f64 {
    if lambda == 0.0 && g < 0.0 {
        0.0
    } else {
        g
    }
}

fn check_problems(problems: &[LocalProblem], topology: &Topology) -> Result<(), SolverError> {
    let n = topology.n();
    if problems.len() != n {
        return Err(SolverError::ProblemCount {
            expected: n,
            got: problems.len(),
        });
    }
    for (i, p) in problems.iter().enumerate() {
        if p.n() != n || p.agent() != i {
            return Err(SolverError::ProblemSize {
                agent: i,
                expected: n,
                got: p.n(),
            });
        }
    }
    Ok(())
}

/// `(L ⊗ I) x` on per-agent blocks.
fn laplacian_blocks(topology: &Topology, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
    (0..topology.n())
        .map(|i| {
            let mut acc = &x[i] * topology.degree(i) as f64;
            for &j in topology.neighbors(i) {
                acc -= &x[j];
            }
            acc
        })
        .collect()
}

fn flow_derivative(
    state: &SolverState,
    problems: &[LocalProblem],
    topology: &Topology,
    alpha: f64,
) -> FlowDerivative {
    let lz = laplacian_blocks(topology, &state.z_tilde);
    let lzeta = laplacian_blocks(topology, &state.zeta);
    let mut dz = Vec::with_capacity(problems.len());
    let mut dzeta = Vec::with_capacity(problems.len());
    for (i, p) in problems.iter().enumerate() {
        let z = &state.z_tilde[i];
        let (_, grad_f) = p.eval_f(z);
        let mut d = &lzeta[i] - &lz[i];
        d.axpy(-alpha, &grad_f, 1.0);
        if p.num_inequalities() > 0 {
            p.add_g_gradient_weighted(z, &state.lambda[i], -alpha, &mut d);
        }
        p.add_h_gradient_weighted(&state.nu[i], -alpha, &mut d);
        dz.push(d);
        dzeta.push(-&lz[i]);
    }
    FlowDerivative {
        z_tilde: dz,
        zeta: dzeta,
    }
}

/// Right-hand side of the estimator / gradient-descent part.
pub fn solver_derivative(
    state: &SolverState,
    problems: &[LocalProblem],
    topology: &Topology,
    params: &SolverParams,
) -> Result<FlowDerivative, SolverError> {
    check_problems(problems, topology)?;
    state.check(problems)?;
    Ok(flow_derivative(state, problems, topology, params.alpha))
}

fn eta_from(lambda: &[DVector<f64>], g: &[DVector<f64>]) -> Vec<DVector<f64>> {
    lambda
        .iter()
        .zip(g)
        .map(|(l, gi)| DVector::from_fn(l.len(), |k, _| switch_eta(l[k], gi[k])))
        .collect()
}

/// `λ̇` per agent.
pub fn lambda_derivative(state: &SolverState, problems: &[LocalProblem]) -> Vec<DVector<f64>> {
    let g: Vec<_> = problems
        .iter()
        .zip(&state.z_tilde)
        .map(|(p, z)| p.eval_g(z))
        .collect();
    eta_from(&state.lambda, &g)
}

/// `ν̇_i = h_i(z̃_i)`.
pub fn nu_derivative(state: &SolverState, problems: &[LocalProblem]) -> Vec<DVector<f64>> {
    problems
        .iter()
        .zip(&state.z_tilde)
        .map(|(p, z)| p.eval_h(z))
        .collect()
}

/// All four derivatives at once, sharing the `g` evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct FullDerivative {
    pub flow: FlowDerivative,
    pub lambda: Vec<DVector<f64>>,
    pub nu: Vec<DVector<f64>>,
}

pub fn full_derivative(
    state: &SolverState,
    problems: &[LocalProblem],
    topology: &Topology,
    alpha: f64,
) -> FullDerivative {
    FullDerivative {
        flow: flow_derivative(state, problems, topology, alpha),
        lambda: lambda_derivative(state, problems),
        nu: nu_derivative(state, problems),
    }
}

fn euler(state: &SolverState, d: &FullDerivative, dt: f64) -> SolverState {
    let add = |x: &[DVector<f64>], dx: &[DVector<f64>]| -> Vec<DVector<f64>> {
        x.iter().zip(dx).map(|(a, b)| a + b * dt).collect()
    };
    let lambda = state
        .lambda
        .iter()
        .zip(&d.lambda)
        .map(|(l, dl)| (l + dl * dt).map(|v| v.max(0.0)))
        .collect();
    SolverState {
        z_tilde: add(&state.z_tilde, &d.flow.z_tilde),
        zeta: add(&state.zeta, &d.flow.zeta),
        lambda,
        nu: add(&state.nu, &d.nu),
    }
}

/// One explicit Euler step of the whole flow, then `λ ← max(λ, 0)`.
pub fn solver_step(
    state: &SolverState,
    problems: &[LocalProblem],
    topology: &Topology,
    params: &SolverParams,
) -> Result<SolverState, SolverError> {
    check_problems(problems, topology)?;
    state.check(problems)?;
    let next = step_unchecked(state, problems, topology, params);
    if !next.is_finite() {
        return Err(SolverError::Diverged { steps: 1 });
    }
    Ok(next)
}

pub(crate) fn step_unchecked(
    state: &SolverState,
    problems: &[LocalProblem],
    topology: &Topology,
    params: &SolverParams,
) -> SolverState {
    let d = full_derivative(state, problems, topology, params.alpha);
    euler(state, &d, params.dt_solver)
}

/// Pieces of the KKT residual at the mean estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktBreakdown {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub dual: f64,
    pub equality: f64,
}

impl KktBreakdown {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual)
            .max(self.equality)
    }
}

/// KKT residual of `(z̄, λ, ν)` where `z̄` is the mean estimate and each agent
/// contributes its own multipliers.
pub fn kkt_breakdown(state: &SolverState, problems: &[LocalProblem]) -> KktBreakdown {
    let zbar = state.mean_estimate();
    kkt_breakdown_at(&zbar, &state.lambda, &state.nu, problems)
}

pub fn kkt_breakdown_at(
    z: &DVector<f64>,
    lambda: &[DVector<f64>],
    nu: &[DVector<f64>],
    problems: &[LocalProblem],
) -> KktBreakdown {
    let mut grad = DVector::zeros(z.len());
    let mut out = KktBreakdown {
        stationarity: 0.0,
        primal: 0.0,
        complementarity: 0.0,
        dual: 0.0,
        equality: 0.0,
    };
    for (i, p) in problems.iter().enumerate() {
        let (_, gf) = p.eval_f(z);
        grad += gf;
        if p.num_inequalities() > 0 {
            p.add_g_gradient_weighted(z, &lambda[i], 1.0, &mut grad);
            let g = p.eval_g(z);
            for k in 0..g.len() {
                out.primal = out.primal.max(g[k].max(0.0));
                out.complementarity = out.complementarity.max((lambda[i][k] * g[k]).abs());
                out.dual = out.dual.max((-lambda[i][k]).max(0.0));
            }
        }
        p.add_h_gradient_weighted(&nu[i], 1.0, &mut grad);
        out.equality = out.equality.max(p.eval_h(z).norm());
    }
    out.stationarity = grad.norm();
    out
}

pub fn kkt_residual(state: &SolverState, problems: &[LocalProblem]) -> f64 {
    kkt_breakdown(state, problems).max()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    Converged,
    Timeout,
    /// Multipliers exceeded the configured bound: the problem is probably
    /// infeasible at the frozen measurements.
    MultiplierBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub status: ConvergenceStatus,
    pub steps: u64,
    pub time: f64,
    pub consensus: f64,
    pub kkt: f64,
    pub lambda_inf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticSolution {
    /// Consensus `m`: mean of the agents' `m`-blocks.
    pub m: Vector2<f64>,
    pub state: SolverState,
    pub report: ConvergenceReport,
}

/// Run the flow with the measurements inside `problems` frozen until the
/// estimates agree and the KKT residual is small, or the time budget runs out.
///
/// `observer` sees every state (including the initial one).
pub fn static_solve_with(
    initial: SolverState,
    problems: &[LocalProblem],
    topology: &Topology,
    params: &SolverParams,
    mut observer: impl FnMut(u64, &SolverState),
) -> Result<StaticSolution, SolverError> {
    params.validate()?;
    check_problems(problems, topology)?;
    initial.check(problems)?;
    if initial.lambda.iter().any(|l| l.iter().any(|&v| v < 0.0)) {
        return Err(SolverError::NegativeMultiplier);
    }
    let max_steps = (params.max_time / params.dt_solver).ceil() as u64;
    let mut state = initial;
    let mut steps = 0u64;
    observer(0, &state);
    let status = loop {
        if steps % params.check_every == 0 || steps >= max_steps {
            if !state.is_finite() {
                return Err(SolverError::Diverged { steps });
            }
            if state.lambda_norm_inf() > params.multiplier_bound {
                break ConvergenceStatus::MultiplierBound;
            }
            if state.consensus_disagreement(topology) < params.tol_consensus
                && kkt_residual(&state, problems) < params.tol_kkt
            {
                break ConvergenceStatus::Converged;
            }
            if steps >= max_steps {
                break ConvergenceStatus::Timeout;
            }
        }
        state = step_unchecked(&state, problems, topology, params);
        steps += 1;
        observer(steps, &state);
    };
    let report = ConvergenceReport {
        status,
        steps,
        time: steps as f64 * params.dt_solver,
        consensus: state.consensus_disagreement(topology),
        kkt: kkt_residual(&state, problems),
        lambda_inf: state.lambda_norm_inf(),
    };
    let all: Vec<usize> = (0..topology.n()).collect();
    Ok(StaticSolution {
        m: state.mean_m(&all),
        state,
        report,
    })
}

pub fn static_solve(
    initial: SolverState,
    problems: &[LocalProblem],
    topology: &Topology,
    params: &SolverParams,
) -> Result<StaticSolution, SolverError> {
    static_solve_with(initial, problems, topology, params, |_, _| {})
}

/// Shift point for the passivity diagnostics: a KKT point `(z*, λ*, ν*)` and
/// the matching integral state `ζ*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOptimum {
    pub z_star: DVector<f64>,
    pub zeta: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub nu: Vec<DVector<f64>>,
}

impl ReferenceOptimum {
    /// Builds `ζ*` from the equilibrium condition `L ζ* = α w*`, where
    /// `w*_i = ∇f_i + ∇g_iᵀ λ*_i + ∇h_iᵀ ν*_i` at `z*`. The mean of `ζ*` is
    /// zero, matching `ζ(0) = 0` (the flow conserves `Σ ζ_i`).
    pub fn new(
        z_star: DVector<f64>,
        lambda: Vec<DVector<f64>>,
        nu: Vec<DVector<f64>>,
        problems: &[LocalProblem],
        topology: &Topology,
        alpha: f64,
    ) -> Self {
        let n = topology.n();
        let dim = z_star.len();
        let w: Vec<DVector<f64>> = problems
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (_, mut g) = p.eval_f(&z_star);
                if p.num_inequalities() > 0 {
                    p.add_g_gradient_weighted(&z_star, &lambda[i], 1.0, &mut g);
                }
                p.add_h_gradient_weighted(&nu[i], 1.0, &mut g);
                g
            })
            .collect();
        let lpinv = build_laplacian(topology)
            .entries()
            .clone()
            .pseudo_inverse(1e-12)
            .expect("pseudo-inverse of a symmetric matrix");
        let wmat = DMatrix::from_fn(n, dim, |i, c| w[i][c]);
        let zeta_mat = lpinv * wmat * alpha;
        let zeta = (0..n)
            .map(|i| DVector::from_fn(dim, |c, _| zeta_mat[(i, c)]))
            .collect();
        ReferenceOptimum {
            z_star,
            zeta,
            lambda,
            nu,
        }
    }

    /// The equilibrium solver state `(1 ⊗ z*, ζ*, λ*, ν*)`.
    pub fn as_state(&self) -> SolverState {
        SolverState {
            z_tilde: vec![self.z_star.clone(); self.zeta.len()],
            zeta: self.zeta.clone(),
            lambda: self.lambda.clone(),
            nu: self.nu.clone(),
        }
    }
}

/// Shifted quantities and storage functions of the two passive subsystems.
#[derive(Debug, Clone, PartialEq)]
pub struct DualDiagnostics {
    /// `μ_i = ∇g_i(z̃_i)ᵀ λ_i`
    pub mu: Vec<DVector<f64>>,
    /// `ω_i = ∇h_iᵀ ν_i`
    pub omega: Vec<DVector<f64>>,
    pub z_c: Vec<DVector<f64>>,
    pub zeta_c: Vec<DVector<f64>>,
    pub mu_shift: Vec<DVector<f64>>,
    pub omega_shift: Vec<DVector<f64>>,
    /// `S̃ = ½‖z̃_c‖² + ½‖ζ̃‖²`
    pub storage_s: f64,
    /// `Σ U_i`, `U_i = ½(‖λ_i - λ_i*‖² + ‖ν_i - ν_i*‖²)`
    pub storage_u: f64,
    /// `Δ̃ᵀ Z̃ = (μ̃ + ω̃)ᵀ z̃_c`, supply rate of the multiplier subsystem.
    pub supply_dual: f64,
    /// `ũᵀ z̃_c` with `u = -α(φ + μ + ω)` the input of the estimator subsystem.
    pub supply_primal: f64,
    /// `Σ U̇_i` along the flow, `Σ λ̃ᵀη + ν̃ᵀh`.
    pub storage_u_rate: f64,
    /// `Ṡ` along the flow.
    pub storage_s_rate: f64,
}

impl DualDiagnostics {
    /// `S̃ + α ΣU_i`, the storage of the feedback interconnection with gain α.
    pub fn interconnection_storage(&self, alpha: f64) -> f64 {
        self.storage_s + alpha * self.storage_u
    }
}

pub fn dual_diagnostics(
    state: &SolverState,
    problems: &[LocalProblem],
    topology: &Topology,
    alpha: f64,
    optimum: &ReferenceOptimum,
) -> DualDiagnostics {
    let n = problems.len();
    let dim = optimum.z_star.len();
    let weighted = |p: &LocalProblem, z: &DVector<f64>, lam: &DVector<f64>| {
        let mut out = DVector::zeros(dim);
        if p.num_inequalities() > 0 {
            p.add_g_gradient_weighted(z, lam, 1.0, &mut out);
        }
        out
    };
    let pinned = |p: &LocalProblem, nu: &DVector<f64>| {
        let mut out = DVector::zeros(dim);
        p.add_h_gradient_weighted(nu, 1.0, &mut out);
        out
    };

    let mut diag = DualDiagnostics {
        mu: Vec::with_capacity(n),
        omega: Vec::with_capacity(n),
        z_c: Vec::with_capacity(n),
        zeta_c: Vec::with_capacity(n),
        mu_shift: Vec::with_capacity(n),
        omega_shift: Vec::with_capacity(n),
        storage_s: 0.0,
        storage_u: 0.0,
        supply_dual: 0.0,
        supply_primal: 0.0,
        storage_u_rate: 0.0,
        storage_s_rate: 0.0,
    };
    let d = full_derivative(state, problems, topology, alpha);
    for (i, p) in problems.iter().enumerate() {
        let z = &state.z_tilde[i];
        let mu = weighted(p, z, &state.lambda[i]);
        let omega = pinned(p, &state.nu[i]);
        let mu_s = &mu - weighted(p, &optimum.z_star, &optimum.lambda[i]);
        let omega_s = &omega - pinned(p, &optimum.nu[i]);
        let zc = z - &optimum.z_star;
        let zetac = &state.zeta[i] - &optimum.zeta[i];
        let (_, phi) = p.eval_f(z);
        let (_, phi_star) = p.eval_f(&optimum.z_star);
        let u_shift = -((phi - phi_star) + &mu_s + &omega_s) * alpha;

        let lam_s = &state.lambda[i] - &optimum.lambda[i];
        let nu_s = &state.nu[i] - &optimum.nu[i];
        diag.storage_s += 0.5 * (zc.norm_squared() + zetac.norm_squared());
        diag.storage_u += 0.5 * (lam_s.norm_squared() + nu_s.norm_squared());
        diag.supply_dual += (&mu_s + &omega_s).dot(&zc);
        diag.supply_primal += u_shift.dot(&zc);
        diag.storage_u_rate += lam_s.dot(&d.lambda[i]) + nu_s.dot(&d.nu[i]);
        diag.storage_s_rate += zc.dot(&d.flow.z_tilde[i]) + zetac.dot(&d.flow.zeta[i]);

        diag.mu.push(mu);
        diag.omega.push(omega);
        diag.z_c.push(zc);
        diag.zeta_c.push(zetac);
        diag.mu_shift.push(mu_s);
        diag.omega_shift.push(omega_s);
    }
    diag
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{HalfSpace, LocalConstraintSet};

    fn single(halfspaces: &[HalfSpace], r: [f64; 2], q: [f64; 2]) -> (Topology, Vec<LocalProblem>) {
        let t = Topology::new(vec![vec![0]], vec![0]).unwrap();
        let set = LocalConstraintSet::assemble(halfspaces, None, 0, &t, 1.0, &DVector::zeros(2)).unwrap();
        let p = LocalProblem::new(
            0,
            true,
            Vector2::new(r[0], r[1]),
            set,
            Vector2::new(q[0], q[1]),
            Vector2::zeros(),
            1,
            None,
        )
        .unwrap();
        (t, vec![p])
    }

    fn followers_only() -> (Topology, Vec<LocalProblem>) {
        let t = Topology::ring(4, vec![0]).unwrap();
        let problems = (0..4)
            .map(|i| {
                LocalProblem::new(
                    i,
                    false,
                    Vector2::zeros(),
                    LocalConstraintSet::empty(4),
                    Vector2::zeros(),
                    Vector2::zeros(),
                    4,
                    None,
                )
                .unwrap()
            })
            .collect();
        (t, problems)
    }

    #[test]
    fn eta_branches() {
        assert_eq!(switch_eta(0.0, -1.0), 0.0);
        assert_eq!(switch_eta(0.5, -1.0), -1.0);
        assert_eq!(switch_eta(0.0, 2.0), 2.0);
        assert_eq!(switch_eta(0.0, 0.0), 0.0);
    }

    #[test]
    fn consensus_without_forcing_is_still() {
        let (t, problems) = followers_only();
        let mut s = SolverState::initial(&problems, InitMode::Zeros);
        let common = DVector::from_fn(18, |k, _| k as f64 * 0.1);
        for z in &mut s.z_tilde {
            z.copy_from(&common);
        }
        // pins at the common values so h = 0 too
        let d = solver_derivative(&s, &problems, &t, &SolverParams::default()).unwrap();
        for b in d.z_tilde.iter().chain(&d.zeta) {
            assert_eq!(b.norm(), 0.0);
        }
    }

    #[test]
    fn unconstrained_single_agent_m_block() {
        // ṁ = -2α(m - r): m(t) = r + (m0 - r) e^{-2αt}
        let (t, problems) = single(&[], [1.0, 2.0], [0.0, 0.0]);
        let params = SolverParams::with_alpha(2.0);
        let mut s = SolverState::initial(&problems, InitMode::Zeros);
        let steps = 1000;
        for _ in 0..steps {
            s = solver_step(&s, &problems, &t, &params).unwrap();
        }
        let time = steps as f64 * params.dt_solver;
        let decay = (1.0 - 2.0 * params.alpha * params.dt_solver).powi(steps);
        for (k, r) in [1.0, 2.0].iter().enumerate() {
            assert!((s.z_tilde[0][k] - r * (1.0 - decay)).abs() < 1e-12);
            let exact = r * (1.0 - (-2.0 * params.alpha * time).exp());
            assert!((s.z_tilde[0][k] - exact).abs() < 1e-3);
        }
    }

    #[test]
    fn nu_derivative_is_h() {
        let (_, problems) = single(&[], [1.0, 2.0], [1.0, 2.0]);
        let s = SolverState::initial(&problems, InitMode::Zeros);
        let d = nu_derivative(&s, &problems);
        assert_eq!(d[0].as_slice(), &[-1.0, -2.0, 0.0, 0.0]);
        let s = SolverState::initial(&problems, InitMode::Measured);
        assert_eq!(nu_derivative(&s, &problems)[0].norm(), 0.0);
    }

    #[test]
    fn lambda_stays_zero_when_inactive() {
        let line = HalfSpace::new([1.0, 1.0], 30.0).unwrap();
        let (t, problems) = single(&[line], [1.0, 2.0], [1.0, 2.0]);
        let params = SolverParams::with_alpha(2.0);
        let mut s = SolverState::initial(&problems, InitMode::Measured);
        for _ in 0..20_000 {
            s = solver_step(&s, &problems, &t, &params).unwrap();
            assert!(s.lambda[0].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn equilibrium_state_is_fixed() {
        // unconstrained single leader at its optimum with pins satisfied
        let (t, problems) = single(&[], [1.0, 2.0], [0.5, -0.5]);
        let mut s = SolverState::initial(&problems, InitMode::Measured);
        s.z_tilde[0][0] = 1.0;
        s.z_tilde[0][1] = 2.0;
        let next = solver_step(&s, &problems, &t, &SolverParams::default()).unwrap();
        assert_eq!(next, s);
        assert!(kkt_residual(&s, &problems) < 1e-15);
    }

    #[test]
    fn kkt_reports_primal_violation() {
        let line = HalfSpace::new([1.0, 1.0], 3.0).unwrap();
        let (_, problems) = single(&[line], [2.0, 3.0], [1.0, 2.0]);
        let mut s = SolverState::initial(&problems, InitMode::Measured);
        s.z_tilde[0][0] = 2.0;
        s.z_tilde[0][1] = 3.0;
        let g = problems[0].eval_g(&s.z_tilde[0]);
        let worst = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(worst > 0.0);
        assert!(kkt_residual(&s, &problems) >= worst);
    }

    #[test]
    fn rejects_negative_initial_multiplier() {
        let line = HalfSpace::new([1.0, 1.0], 3.0).unwrap();
        let (t, problems) = single(&[line], [2.0, 3.0], [1.0, 2.0]);
        let mut s = SolverState::initial(&problems, InitMode::Zeros);
        s.lambda[0][0] = -1.0;
        assert_eq!(
            static_solve(s, &problems, &t, &SolverParams::default()).unwrap_err(),
            SolverError::NegativeMultiplier
        );
    }

    #[test]
    fn shape_errors() {
        let (t, problems) = followers_only();
        let s = SolverState::initial(&problems[..3], InitMode::Zeros);
        assert!(matches!(
            solver_derivative(&s, &problems, &t, &SolverParams::default()),
            Err(SolverError::StateShape(_))
        ));
        assert!(matches!(
            solver_step(&s, &problems[..3], &t, &SolverParams::default()),
            Err(SolverError::ProblemCount { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn diagnostics_vanish_at_shift_point() {
        let (t, problems) = single(&[], [1.0, 2.0], [0.5, -0.5]);
        let mut z = DVector::zeros(6);
        z[0] = 1.0;
        z[1] = 2.0;
        z[2] = 0.5;
        z[3] = -0.5;
        let opt = ReferenceOptimum::new(z, vec![DVector::zeros(0)], vec![DVector::zeros(4)], &problems, &t, 2.0);
        let d = dual_diagnostics(&opt.as_state(), &problems, &t, 2.0, &opt);
        assert_eq!(d.storage_s, 0.0);
        assert_eq!(d.storage_u, 0.0);
    }
}
