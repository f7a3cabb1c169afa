//! Per-agent constraint sets and the governor constraint functions.
//!
//! Each agent `i` holds a polyhedron `A_i [q; ξ] ≤ b_i + B_i r` built from the
//! half-spaces it senses and its own input polytope. The governor requires the
//! ball centred at the steady state for a constant reference `m`, of radius
//! the current distance to that steady state, to lie inside the polyhedron.
//! Per row `l` this gives two inequalities in `z = (m, z_q, z_ξ)`:
//!
//! ```text
//! lin_l(m)  = A⁽ˡ⁾ [c(m); 0] - b⁽ˡ⁾ - B⁽ˡ⁾ m                    ≤ 0
//! soc_l(z)  = ‖[c(m); 0] - [z_q; z_ξ]‖ + lin_l(m) / ‖A⁽ˡ⁾‖        ≤ 0
//! ```
//!
//! with `c(m) = (1 ⊗ I₂) m`, or `(1 ⊗ I₂) m + bias` when the constraints are
//! bias-aware. `g_i` stacks the pair for each row, `[lin_0, soc_0, lin_1, ...]`.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Topology;

/// Smoothing radius for the norm gradient at zero.
pub const NORM_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("half-space normal must be nonzero and finite")]
    BadNormal,
    #[error("input polytope has {rows} rows in A_u but {len} entries in b_u")]
    PolytopeShape { rows: usize, len: usize },
    #[error("constraint row {row} has a zero coefficient vector")]
    DegenerateRow { row: usize },
    #[error("{what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// `{p ∈ R² : normal · p ≤ offset}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub normal: [f64; 2],
    pub offset: f64,
}

impl HalfSpace {
    pub fn new(normal: [f64; 2], offset: f64) -> Result<Self, ConstraintError> {
        let h = HalfSpace { normal, offset };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        let [a, b] = self.normal;
        if !(a.is_finite() && b.is_finite() && self.offset.is_finite()) || (a == 0.0 && b == 0.0) {
            return Err(ConstraintError::BadNormal);
        }
        Ok(())
    }

    /// `offset - normal · p`: positive inside.
    pub fn margin(&self, p: &Vector2<f64>) -> f64 {
        self.offset - (self.normal[0] * p[0] + self.normal[1] * p[1])
    }

    /// Foot of the perpendicular from `p` onto the boundary line.
    pub fn foot(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let nv = Vector2::new(self.normal[0], self.normal[1]);
        p + nv * (self.margin(p) / nv.norm_squared())
    }
}

/// `{u : A_u u ≤ b_u}`; zero rows means unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPolytope {
    pub a: Vec<[f64; 2]>,
    pub b: Vec<f64>,
}

impl InputPolytope {
    pub fn unconstrained() -> Self {
        InputPolytope { a: vec![], b: vec![] }
    }

    /// `‖u‖_∞ ≤ limit`.
    pub fn infinity_box(limit: f64) -> Self {
        InputPolytope {
            a: vec![[1., 0.], [0., 1.], [-1., 0.], [0., -1.]],
            b: vec![limit; 4],
        }
    }

    pub fn rows(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        if self.a.len() != self.b.len() {
            return Err(ConstraintError::PolytopeShape {
                rows: self.a.len(),
                len: self.b.len(),
            });
        }
        Ok(())
    }
}

/// `A^q` (one row per sensed half-space and robot) and `b^q`.
pub fn build_obstacle_constraints(halfspaces: &[HalfSpace], n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows = halfspaces.len() * n;
    let mut a = DMatrix::zeros(rows, 4 * n);
    let mut b = DVector::zeros(rows);
    for (k, h) in halfspaces.iter().enumerate() {
        for j in 0..n {
            let row = k * n + j;
            a[(row, 2 * j)] = h.normal[0];
            a[(row, 2 * j + 1)] = h.normal[1];
            b[row] = h.offset;
        }
    }
    (a, b)
}

/// `(A^u, b^u, B^u)` such that `A_u u_i ≤ b_u` reads `A^u [q; ξ] ≤ b^u + B^u r`.
///
/// `u_i` is the plant input of agent `i` including the formation shift, so the
/// bias enters `b^u` as a constant.
pub fn build_input_constraints(
    polytope: &InputPolytope,
    agent: usize,
    topology: &Topology,
    alpha_r: f64,
    formation_bias: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>), ConstraintError> {
    polytope.validate()?;
    let n = topology.n();
    if formation_bias.len() != 2 * n {
        return Err(ConstraintError::Dimension {
            what: "formation_bias",
            expected: 2 * n,
            got: formation_bias.len(),
        });
    }
    let gamma = polytope.rows();
    let delta = topology.delta()[agent];

    // u_i = M [q; ξ] + δ α_r r + c
    let mut m = DMatrix::zeros(2, 4 * n);
    let mut c = Vector2::zeros();
    let deg = topology.degree(agent) as f64;
    for k in 0..2 {
        m[(k, 2 * agent + k)] -= deg;
        m[(k, 2 * n + 2 * agent + k)] += deg;
        c[k] += deg * formation_bias[2 * agent + k];
        for &j in topology.neighbors(agent) {
            m[(k, 2 * j + k)] += 1.0;
            m[(k, 2 * n + 2 * j + k)] -= 1.0;
            c[k] -= formation_bias[2 * j + k];
        }
        m[(k, 2 * agent + k)] -= delta * alpha_r;
        c[k] += delta * alpha_r * formation_bias[2 * agent + k];
    }

    let au = DMatrix::from_fn(gamma, 2, |r, k| polytope.a[r][k]);
    let a = &au * &m;
    let b = DVector::from_fn(gamma, |r, _| polytope.b[r] - (au.row(r) * c)[0]);
    let bref = &au * (-delta * alpha_r);
    Ok((a, b, bref))
}

/// Stacked `A_i`, `b_i`, `B_i` for one agent; obstacle rows first.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalConstraintSet {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub b_ref: DMatrix<f64>,
    pub obstacle_rows: usize,
    pub input_rows: usize,
}

impl LocalConstraintSet {
    pub fn empty(n: usize) -> Self {
        LocalConstraintSet {
            a: DMatrix::zeros(0, 4 * n),
            b: DVector::zeros(0),
            b_ref: DMatrix::zeros(0, 2),
            obstacle_rows: 0,
            input_rows: 0,
        }
    }

    pub fn assemble(
        halfspaces: &[HalfSpace],
        polytope: Option<&InputPolytope>,
        agent: usize,
        topology: &Topology,
        alpha_r: f64,
        formation_bias: &DVector<f64>,
    ) -> Result<Self, ConstraintError> {
        let n = topology.n();
        for h in halfspaces {
            h.validate()?;
        }
        let (aq, bq) = build_obstacle_constraints(halfspaces, n);
        let (au, bu, bru) = match polytope {
            Some(p) => build_input_constraints(p, agent, topology, alpha_r, formation_bias)?,
            None => (DMatrix::zeros(0, 4 * n), DVector::zeros(0), DMatrix::zeros(0, 2)),
        };
        let (ro, ri) = (aq.nrows(), au.nrows());
        let mut a = DMatrix::zeros(ro + ri, 4 * n);
        let mut b = DVector::zeros(ro + ri);
        let mut b_ref = DMatrix::zeros(ro + ri, 2);
        a.rows_mut(0, ro).copy_from(&aq);
        a.rows_mut(ro, ri).copy_from(&au);
        b.rows_mut(0, ro).copy_from(&bq);
        b.rows_mut(ro, ri).copy_from(&bu);
        b_ref.rows_mut(ro, ri).copy_from(&bru);
        Ok(LocalConstraintSet {
            a,
            b,
            b_ref,
            obstacle_rows: ro,
            input_rows: ri,
        })
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    /// Largest violation of `A x ≤ b + B m` at the state `x = [q; ξ]`.
    pub fn max_violation(&self, x: &DVector<f64>, m: &Vector2<f64>) -> f64 {
        let lhs = &self.a * x;
        let rhs = &self.b + &self.b_ref * m;
        (lhs - rhs).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RowCoeffs {
    /// coefficient of `m` in `lin_l`, i.e. `A⁽ˡ⁾(1⊗I₂) - B⁽ˡ⁾`
    m_coeff: Vector2<f64>,
    /// constant part of `lin_l`: `A⁽ˡ⁾[bias; 0] - b⁽ˡ⁾`
    constant: f64,
    norm: f64,
}

/// The decomposed governor problem held by one agent.
///
/// Decision variable `z = (m, z_q, z_ξ) ∈ R^{4n+2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalProblem {
    agent: usize,
    is_leader: bool,
    reference: Vector2<f64>,
    constraints: LocalConstraintSet,
    q_i: Vector2<f64>,
    xi_i: Vector2<f64>,
    n: usize,
    center_bias: Option<DVector<f64>>,
    rows: Vec<RowCoeffs>,
}

impl LocalProblem {
    /// `center_bias` switches the ball centre to `(1⊗I₂)m + bias`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        agent: usize,
        is_leader: bool,
        reference: Vector2<f64>,
        constraints: LocalConstraintSet,
        q_i: Vector2<f64>,
        xi_i: Vector2<f64>,
        n: usize,
        center_bias: Option<DVector<f64>>,
    ) -> Result<Self, ConstraintError> {
        if constraints.a.ncols() != 4 * n {
            return Err(ConstraintError::Dimension {
                what: "constraint columns",
                expected: 4 * n,
                got: constraints.a.ncols(),
            });
        }
        if let Some(b) = &center_bias {
            if b.len() != 2 * n {
                return Err(ConstraintError::Dimension {
                    what: "center bias",
                    expected: 2 * n,
                    got: b.len(),
                });
            }
        }
        let mut rows = Vec::with_capacity(constraints.rows());
        for l in 0..constraints.rows() {
            let a_row = constraints.a.row(l);
            let norm = a_row.norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(ConstraintError::DegenerateRow { row: l });
            }
            let mut sum = Vector2::zeros();
            let mut constant = -constraints.b[l];
            for j in 0..n {
                for k in 0..2 {
                    let coeff = a_row[2 * j + k];
                    sum[k] += coeff;
                    if let Some(bias) = &center_bias {
                        constant += coeff * bias[2 * j + k];
                    }
                }
            }
            let bl = Vector2::new(constraints.b_ref[(l, 0)], constraints.b_ref[(l, 1)]);
            rows.push(RowCoeffs {
                m_coeff: sum - bl,
                constant,
                norm,
            });
        }
        Ok(LocalProblem {
            agent,
            is_leader,
            reference,
            constraints,
            q_i,
            xi_i,
            n,
            center_bias,
            rows,
        })
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn is_leader(&self) -> bool {
        self.is_leader
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `4n + 2`.
    pub fn dim(&self) -> usize {
        4 * self.n + 2
    }

    /// Number of inequality components `m_i` (two per constraint row).
    pub fn num_inequalities(&self) -> usize {
        2 * self.rows.len()
    }

    /// Number of equality components `p_i`.
    pub fn num_equalities(&self) -> usize {
        4
    }

    pub fn reference(&self) -> Vector2<f64> {
        self.reference
    }

    pub fn constraints(&self) -> &LocalConstraintSet {
        &self.constraints
    }

    pub fn center_bias(&self) -> Option<&DVector<f64>> {
        self.center_bias.as_ref()
    }

    pub fn pins(&self) -> (Vector2<f64>, Vector2<f64>) {
        (self.q_i, self.xi_i)
    }

    pub fn set_reference(&mut self, r: Vector2<f64>) {
        self.reference = r;
    }

    /// Refresh the measured own state pinned by `h_i`.
    pub fn set_measurement(&mut self, q_i: Vector2<f64>, xi_i: Vector2<f64>) {
        self.q_i = q_i;
        self.xi_i = xi_i;
    }

    fn check_z(&self, z: &DVector<f64>) {
        assert_eq!(z.len(), self.dim(), "decision vector must have length 4n+2");
    }

    /// `[c(m); 0] - [z_q; z_ξ]`
    fn center_gap(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(4 * n, |idx, _| {
            if idx < 2 * n {
                let c = z[idx % 2] + self.center_bias.as_ref().map_or(0.0, |b| b[idx]);
                c - z[2 + idx]
            } else {
                -z[2 + idx]
            }
        })
    }

    fn lin(&self, row: &RowCoeffs, m: &Vector2<f64>) -> f64 {
        row.m_coeff.dot(m) + row.constant
    }

    /// `g_i(z)`, ordered `[lin_0, soc_0, lin_1, soc_1, ...]`; feasible iff all ≤ 0.
    pub fn eval_g(&self, z: &DVector<f64>) -> DVector<f64> {
        self.check_z(z);
        let m = Vector2::new(z[0], z[1]);
        let dist = self.center_gap(z).norm();
        let mut g = DVector::zeros(self.num_inequalities());
        for (l, row) in self.rows.iter().enumerate() {
            let lin = self.lin(row, &m);
            g[2 * l] = lin;
            g[2 * l + 1] = dist + lin / row.norm;
        }
        g
    }

    /// Jacobian of `g_i`, one row per component.
    ///
    /// The norm term uses `∇√(‖v‖² + ε²)`, which vanishes at `v = 0`.
    pub fn eval_g_gradient(&self, z: &DVector<f64>) -> DMatrix<f64> {
        self.check_z(z);
        let dim = self.dim();
        let norm_grad = self.norm_gradient(z);
        let mut jac = DMatrix::zeros(self.num_inequalities(), dim);
        for (l, row) in self.rows.iter().enumerate() {
            jac[(2 * l, 0)] = row.m_coeff[0];
            jac[(2 * l, 1)] = row.m_coeff[1];
            for c in 0..dim {
                jac[(2 * l + 1, c)] = norm_grad[c];
            }
            jac[(2 * l + 1, 0)] += row.m_coeff[0] / row.norm;
            jac[(2 * l + 1, 1)] += row.m_coeff[1] / row.norm;
        }
        jac
    }

    /// `(∇g_i)ᵀ w` accumulated into `out` (scaled by `scale`), without forming
    /// the Jacobian.
    pub fn add_g_gradient_weighted(
        &self,
        z: &DVector<f64>,
        weights: &DVector<f64>,
        scale: f64,
        out: &mut DVector<f64>,
    ) {
        self.check_z(z);
        assert_eq!(weights.len(), self.num_inequalities());
        let mut soc_weight = 0.0;
        let mut m_part = Vector2::zeros();
        for (l, row) in self.rows.iter().enumerate() {
            let (wl, ws) = (weights[2 * l], weights[2 * l + 1]);
            soc_weight += ws;
            m_part += row.m_coeff * (wl + ws / row.norm);
        }
        if soc_weight != 0.0 {
            let grad = self.norm_gradient(z);
            out.axpy(scale * soc_weight, &grad, 1.0);
        }
        out[0] += scale * m_part[0];
        out[1] += scale * m_part[1];
    }

    /// Smoothed gradient of `‖[c(m); 0] - [z_q; z_ξ]‖` with respect to `z`.
    fn norm_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let gap = self.center_gap(z);
        let nsq = gap.norm_squared();
        let denom = (nsq + NORM_SMOOTHING * NORM_SMOOTHING).sqrt();
        let mut grad = DVector::zeros(self.dim());
        if nsq == 0.0 {
            return grad;
        }
        for j in 0..n {
            for k in 0..2 {
                let gq = gap[2 * j + k] / denom;
                grad[k] += gq;
                grad[2 + 2 * j + k] = -gq;
                grad[2 + 2 * n + 2 * j + k] = -gap[2 * n + 2 * j + k] / denom;
            }
        }
        grad
    }

    /// `h_i(z) = [z_q,i - q_i; z_ξ,i - ξ_i]`.
    pub fn eval_h(&self, z: &DVector<f64>) -> DVector<f64> {
        self.check_z(z);
        let (qi, xi) = self.pin_indices();
        DVector::from_vec(vec![
            z[qi] - self.q_i[0],
            z[qi + 1] - self.q_i[1],
            z[xi] - self.xi_i[0],
            z[xi + 1] - self.xi_i[1],
        ])
    }

    /// Constant selector Jacobian of `h_i`.
    pub fn h_gradient(&self) -> DMatrix<f64> {
        let (qi, xi) = self.pin_indices();
        let mut jac = DMatrix::zeros(4, self.dim());
        jac[(0, qi)] = 1.0;
        jac[(1, qi + 1)] = 1.0;
        jac[(2, xi)] = 1.0;
        jac[(3, xi + 1)] = 1.0;
        jac
    }

    /// `(∇h_i)ᵀ ν` accumulated into `out` (scaled by `scale`).
    pub fn add_h_gradient_weighted(&self, nu: &DVector<f64>, scale: f64, out: &mut DVector<f64>) {
        let (qi, xi) = self.pin_indices();
        out[qi] += scale * nu[0];
        out[qi + 1] += scale * nu[1];
        out[xi] += scale * nu[2];
        out[xi + 1] += scale * nu[3];
    }

    /// Column offsets of this agent's own `z_q` and `z_ξ` blocks.
    pub fn pin_indices(&self) -> (usize, usize) {
        (2 + 2 * self.agent, 2 + 2 * self.n + 2 * self.agent)
    }

    /// `f_i(z) = ‖r - m‖²` for leaders, `0` otherwise, with its gradient.
    pub fn eval_f(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        self.check_z(z);
        let mut grad = DVector::zeros(self.dim());
        if !self.is_leader {
            return (0.0, grad);
        }
        let e = Vector2::new(z[0] - self.reference[0], z[1] - self.reference[1]);
        grad[0] = 2.0 * e[0];
        grad[1] = 2.0 * e[1];
        (e.norm_squared(), grad)
    }
}

/// Index helpers for the `z = (m, z_q, z_ξ)` layout.
pub mod layout {
    pub fn dim(n: usize) -> usize {
        4 * n + 2
    }
    pub fn zq(j: usize) -> usize {
        2 + 2 * j
    }
    pub fn zxi(n: usize, j: usize) -> usize {
        2 + 2 * n + 2 * j
    }
}
