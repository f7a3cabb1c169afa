//! Centralized brute-force solution of the governor projection.
//!
//! Once every `z_q`, `z_ξ` block is pinned to the measured plant state the
//! only free variable is `m ∈ R²`, so the problem
//!
//! ```text
//! minimize ‖r - m‖²   subject to   g_i(m, q(t), ξ(t)) ≤ 0 for every agent i
//! ```
//!
//! can be solved by exhaustive search. The feasible set is convex, which the
//! final polish step relies on.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::constraints::{HalfSpace, LocalProblem};
use crate::plant::PlantState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    /// Grid spacing per level; the first level covers the whole search box.
    pub ladder: Vec<f64>,
    /// Inflation of the bounding box around `r`, robots and hyperplane feet.
    pub margin: f64,
    /// Half-width of a refinement box in units of the previous spacing.
    pub refine_span: f64,
    /// Run the continuous boundary polish after the grid levels.
    pub polish: bool,
    /// Lateral reach of the polish scan around the grid incumbent.
    pub polish_span: f64,
    /// `|g| ≤ active_tol` marks a row active.
    pub active_tol: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            ladder: vec![0.05, 1e-3, 1e-5],
            margin: 2.0,
            refine_span: 2.0,
            polish: true,
            polish_span: 0.25,
            active_tol: 1e-7,
        }
    }
}

impl OracleOptions {
    /// A single grid level with no refinement or polish.
    pub fn coarse(resolution: f64) -> Self {
        OracleOptions {
            ladder: vec![resolution],
            polish: false,
            ..Default::default()
        }
    }
}

/// Row `k` of agent `agent`'s `g_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowId {
    pub agent: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub lambda: Vec<DVector<f64>>,
    pub nu: Vec<DVector<f64>>,
    /// Active-set gradients were rank deficient, so `λ` is one of many.
    pub degenerate: bool,
    /// `‖∇_m L‖` left after the least-squares solve.
    pub stationarity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub m_star: Vector2<f64>,
    pub objective: f64,
    pub feasible: bool,
    pub active_rows: Vec<RowId>,
    /// Best objective after each grid level (and the polish, if run).
    pub level_objectives: Vec<f64>,
    pub multipliers: Option<Multipliers>,
}

/// Pinned decision vectors and the worst constraint value as a function of `m`.
struct Pinned<'a> {
    problems: &'a [LocalProblem],
    z: DVector<f64>,
}

impl<'a> Pinned<'a> {
    fn new(problems: &'a [LocalProblem], state: &PlantState) -> Self {
        let n = state.q.len() / 2;
        let mut z = DVector::zeros(4 * n + 2);
        z.rows_mut(2, 2 * n).copy_from(&state.q);
        z.rows_mut(2 + 2 * n, 2 * n).copy_from(&state.xi);
        Pinned { problems, z }
    }

    fn at(&self, m: &Vector2<f64>) -> DVector<f64> {
        let mut z = self.z.clone();
        z[0] = m[0];
        z[1] = m[1];
        z
    }

    fn worst(&self, m: &Vector2<f64>) -> f64 {
        let z = self.at(m);
        self.problems
            .iter()
            .filter(|p| p.num_inequalities() > 0)
            .map(|p| p.eval_g(&z).max())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn feasible(&self, m: &Vector2<f64>) -> bool {
        self.worst(m) <= 0.0
    }
}

fn objective(r: &Vector2<f64>, m: &Vector2<f64>) -> f64 {
    (r - m).norm_squared()
}

/// `true` if `a` should replace `b` as the incumbent.
fn better(r: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let (fa, fb) = (objective(r, a), objective(r, b));
    fa < fb || (fa == fb && (a[0], a[1]) < (b[0], b[1]))
}

/// Search box `[lo, hi]` around `r`, the robots and the feet of both on each
/// hyperplane.
pub fn bounding_box(
    r: &Vector2<f64>,
    state: &PlantState,
    halfspaces: &[HalfSpace],
    margin: f64,
) -> (Vector2<f64>, Vector2<f64>) {
    let n = state.q.len() / 2;
    let mut pts: Vec<Vector2<f64>> = vec![*r];
    pts.extend((0..n).map(|i| state.position(i)));
    let anchors = pts.clone();
    for h in halfspaces {
        pts.extend(anchors.iter().map(|p| h.foot(p)));
    }
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in &pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo.add_scalar(-margin), hi.add_scalar(margin))
}

fn scan(
    pinned: &Pinned,
    r: &Vector2<f64>,
    lo: Vector2<f64>,
    hi: Vector2<f64>,
    h: f64,
) -> Option<Vector2<f64>> {
    let nx = ((hi[0] - lo[0]) / h).floor() as i64;
    let ny = ((hi[1] - lo[1]) / h).floor() as i64;
    let mut best: Option<Vector2<f64>> = None;
    for ix in 0..=nx {
        let x = lo[0] + ix as f64 * h;
        for iy in 0..=ny {
            let m = Vector2::new(x, lo[1] + iy as f64 * h);
            if best.is_some_and(|b| objective(r, &m) > objective(r, &b)) {
                continue;
            }
            if pinned.feasible(&m) && best.is_none_or(|b| better(r, &m, &b)) {
                best = Some(m);
            }
        }
    }
    best
}

/// Smallest `ρ ≥ 0` with `r + ρ d` feasible, if the ray meets the set.
fn ray_entry(pinned: &Pinned, r: &Vector2<f64>, d: &Vector2<f64>, reach: f64) -> Option<f64> {
    let g = |rho: f64| pinned.worst(&(r + d * rho));
    // worst() is convex along the ray: golden-section for its minimum
    let (mut a, mut b) = (0.0, reach);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut e = a + phi * (b - a);
    let (mut gc, mut ge) = (g(c), g(e));
    for _ in 0..200 {
        if gc <= 0.0 || ge <= 0.0 || (b - a) < 1e-14 {
            break;
        }
        if gc < ge {
            b = e;
            e = c;
            ge = gc;
            c = b - phi * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = e;
            gc = ge;
            e = a + phi * (b - a);
            ge = g(e);
        }
    }
    let mut inside = if gc <= 0.0 {
        c
    } else if ge <= 0.0 {
        e
    } else {
        return None;
    };
    let mut outside = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (inside + outside);
        if mid == inside || mid == outside {
            break;
        }
        if g(mid) <= 0.0 {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    Some(inside)
}

/// Minimise the entry distance over ray directions around the incumbent: a
/// uniform scan of the arc brackets the minimum, ternary search finishes it.
fn polish(pinned: &Pinned, r: &Vector2<f64>, incumbent: &Vector2<f64>, span: f64) -> Option<Vector2<f64>> {
    const SAMPLES: usize = 400;
    let v = incumbent - r;
    let rho0 = v.norm();
    if rho0 == 0.0 {
        return None;
    }
    let psi0 = v[1].atan2(v[0]);
    let reach = rho0 + 2.0 * span;
    let half = (span / rho0).atan().min(0.5 * std::f64::consts::PI);
    let dist = |psi: f64| {
        let d = Vector2::new(psi.cos(), psi.sin());
        ray_entry(pinned, r, &d, reach).unwrap_or(f64::INFINITY)
    };
    let step = 2.0 * half / SAMPLES as f64;
    let angles: Vec<f64> = (0..=SAMPLES).map(|k| psi0 - half + k as f64 * step).collect();
    let values: Vec<f64> = angles.iter().map(|&a| dist(a)).collect();
    let k = (0..values.len()).min_by(|&a, &b| values[a].total_cmp(&values[b]))?;
    if !values[k].is_finite() {
        return None;
    }
    let (mut a, mut b) = (angles[k.saturating_sub(1)], angles[(k + 1).min(SAMPLES)]);
    for _ in 0..200 {
        if b - a < 1e-14 {
            break;
        }
        let c = a + (b - a) / 3.0;
        let e = b - (b - a) / 3.0;
        if dist(c) <= dist(e) {
            b = e;
        } else {
            a = c;
        }
    }
    let psi = 0.5 * (a + b);
    let rho = dist(psi);
    if !rho.is_finite() {
        return None;
    }
    let m = r + Vector2::new(psi.cos(), psi.sin()) * rho;
    pinned.feasible(&m).then_some(m)
}

/// Exhaustive grid search plus refinement for the governed reference at the
/// measured `state`. `halfspaces` only shapes the search box.
pub fn grid_project(
    r: &Vector2<f64>,
    state: &PlantState,
    problems: &[LocalProblem],
    halfspaces: &[HalfSpace],
    options: &OracleOptions,
) -> OracleResult {
    let pinned = Pinned::new(problems, state);
    let done = |m: Vector2<f64>, levels: Vec<f64>| {
        let mut res = OracleResult {
            m_star: m,
            objective: objective(r, &m),
            feasible: true,
            active_rows: Vec::new(),
            level_objectives: levels,
            multipliers: None,
        };
        res.active_rows = active_rows(&res, state, problems, options.active_tol);
        res
    };
    if pinned.feasible(r) {
        return done(*r, vec![0.0]);
    }

    let (lo, hi) = bounding_box(r, state, halfspaces, options.margin);
    let mut levels = Vec::new();
    let Some(mut best) = scan(&pinned, r, lo, hi, options.ladder[0]) else {
        return OracleResult {
            m_star: *r,
            objective: f64::INFINITY,
            feasible: false,
            active_rows: Vec::new(),
            level_objectives: vec![f64::INFINITY],
            multipliers: None,
        };
    };
    levels.push(objective(r, &best));
    for w in options.ladder.windows(2) {
        let span = options.refine_span * w[0];
        // keep the lattice anchored on the incumbent so it is always a candidate
        let lo = best.add_scalar(-span);
        let hi = best.add_scalar(span + 0.5 * w[1]);
        if let Some(cand) = scan(&pinned, r, lo, hi, w[1]) {
            if better(r, &cand, &best) {
                best = cand;
            }
        }
        levels.push(objective(r, &best));
    }
    if options.polish {
        let span = options.polish_span.max(*options.ladder.last().unwrap());
        if let Some(cand) = polish(&pinned, r, &best, span) {
            if objective(r, &cand) <= objective(r, &best) {
                best = cand;
            }
        }
        levels.push(objective(r, &best));
    }
    done(best, levels)
}

fn active_rows(result: &OracleResult, state: &PlantState, problems: &[LocalProblem], tol: f64) -> Vec<RowId> {
    let z = Pinned::new(problems, state).at(&result.m_star);
    let mut rows = Vec::new();
    for (agent, p) in problems.iter().enumerate() {
        if p.num_inequalities() == 0 {
            continue;
        }
        for (row, g) in p.eval_g(&z).iter().enumerate() {
            if g.abs() <= tol {
                rows.push(RowId { agent, row });
            }
        }
    }
    rows
}

/// The optimum as a full decision vector `(m*, q, ξ)`.
pub fn pinned_optimum(result: &OracleResult, state: &PlantState) -> DVector<f64> {
    let n = state.q.len() / 2;
    let mut z = DVector::zeros(4 * n + 2);
    z[0] = result.m_star[0];
    z[1] = result.m_star[1];
    z.rows_mut(2, 2 * n).copy_from(&state.q);
    z.rows_mut(2 + 2 * n, 2 * n).copy_from(&state.xi);
    z
}

/// Least-squares KKT multipliers at a feasible oracle optimum. Inactive rows
/// get `λ = 0`; `ν` absorbs the `z_q`, `z_ξ` part of the stationarity
/// equation exactly.
pub fn recover_multipliers(result: &OracleResult, state: &PlantState, problems: &[LocalProblem]) -> Option<Multipliers> {
    if !result.feasible {
        return None;
    }
    let z = pinned_optimum(result, state);
    let dim = z.len();
    let mut grad_f = DVector::zeros(dim);
    for p in problems {
        grad_f += p.eval_f(&z).1;
    }
    let k = result.active_rows.len();
    let mut lambda: Vec<DVector<f64>> = problems.iter().map(|p| DVector::zeros(p.num_inequalities())).collect();
    let mut degenerate = false;
    if k > 0 {
        let jacobians: Vec<DMatrix<f64>> = problems.iter().map(|p| p.eval_g_gradient(&z)).collect();
        let jm = DMatrix::from_fn(2, k, |c, j| {
            let id = result.active_rows[j];
            jacobians[id.agent][(id.row, c)]
        });
        let rhs = -grad_f.rows(0, 2).into_owned();
        let svd = jm.clone().svd(true, true);
        let scale = svd.singular_values.max().max(1.0);
        let rank = svd.rank(1e-10 * scale);
        degenerate = rank < k;
        let sol = svd.solve(&rhs, 1e-10 * scale).expect("svd computed with u and v");
        for (j, id) in result.active_rows.iter().enumerate() {
            lambda[id.agent][id.row] = sol[j].max(0.0);
        }
    }
    let mut grad = grad_f;
    for (p, l) in problems.iter().zip(&lambda) {
        if p.num_inequalities() > 0 {
            p.add_g_gradient_weighted(&z, l, 1.0, &mut grad);
        }
    }
    let nu = problems
        .iter()
        .map(|p| {
            let (qi, xi) = p.pin_indices();
            DVector::from_vec(vec![-grad[qi], -grad[qi + 1], -grad[xi], -grad[xi + 1]])
        })
        .collect();
    Some(Multipliers {
        lambda,
        nu,
        degenerate,
        stationarity_residual: grad.rows(0, 2).norm(),
    })
}
