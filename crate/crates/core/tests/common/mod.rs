#![allow(dead_code)]

use nalgebra::{DVector, Vector2};
use netgov::constraints::{HalfSpace, InputPolytope, LocalConstraintSet, LocalProblem};
use netgov::graph::Topology;
use netgov::plant::PlantState;
use netgov::scenario::{builtin, ScenarioConfig};
use rand::rngs::StdRng;
use rand::Rng;

pub fn shipped(name: &str) -> ScenarioConfig {
    builtin::load(name).expect("shipped scenario").expect("valid scenario")
}

pub fn admissible() -> ScenarioConfig {
    shipped("ring5_admissible")
}

pub fn inadmissible() -> ScenarioConfig {
    shipped("ring5_inadmissible")
}

pub struct RandomProblem {
    pub topology: Topology,
    pub problems: Vec<LocalProblem>,
    pub state: PlantState,
    pub bias: DVector<f64>,
    pub bias_aware: bool,
    pub halfspaces: Vec<HalfSpace>,
    pub polytopes: Vec<Option<InputPolytope>>,
    pub alpha_r: f64,
}

pub fn uniform(rng: &mut StdRng, lo: f64, hi: f64, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(lo..hi))
}

pub fn random_halfspace(rng: &mut StdRng, offset_lo: f64, offset_hi: f64) -> HalfSpace {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let scale: f64 = rng.random_range(0.5..2.0);
    HalfSpace::new(
        [scale * theta.cos(), scale * theta.sin()],
        scale * rng.random_range(offset_lo..offset_hi),
    )
    .unwrap()
}

/// Ring of `n` robots, leader 0, one or two half-spaces seen by everyone and
/// input boxes on every other agent.
pub fn random_problem(rng: &mut StdRng, n: usize) -> RandomProblem {
    let topology = Topology::ring(n, vec![0]).unwrap();
    let alpha_r = rng.random_range(0.5..2.0);
    let bias = uniform(rng, -1.0, 1.0, 2 * n);
    let bias_aware = rng.random_bool(0.5);
    let k = rng.random_range(1..=2);
    let halfspaces: Vec<HalfSpace> = (0..k).map(|_| random_halfspace(rng, 1.0, 4.0)).collect();
    let polytopes: Vec<Option<InputPolytope>> = (0..n)
        .map(|i| (i % 2 == 1).then(|| InputPolytope::infinity_box(rng.random_range(2.0..10.0))))
        .collect();
    let state = PlantState::new(uniform(rng, -2.0, 2.0, 2 * n), uniform(rng, -0.5, 0.5, 2 * n));
    let r = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    let problems = (0..n)
        .map(|i| {
            let set =
                LocalConstraintSet::assemble(&halfspaces, polytopes[i].as_ref(), i, &topology, alpha_r, &bias)
                    .unwrap();
            LocalProblem::new(
                i,
                topology.is_leader(i),
                r,
                set,
                state.position(i),
                state.integral(i),
                n,
                bias_aware.then(|| bias.clone()),
            )
            .unwrap()
        })
        .collect();
    RandomProblem {
        topology,
        problems,
        state,
        bias,
        bias_aware,
        halfspaces,
        polytopes,
        alpha_r,
    }
}

/// Ball centre `[(1⊗I₂)m (+ bias); 0]` written out directly.
pub fn ball_center(m: &Vector2<f64>, n: usize, bias: Option<&DVector<f64>>) -> DVector<f64> {
    DVector::from_fn(4 * n, |c, _| {
        if c < 2 * n {
            m[c % 2] + bias.map_or(0.0, |b| b[c])
        } else {
            0.0
        }
    })
}

/// `z = (m, q, ξ)` with every block pinned to the measured state.
pub fn pinned_z(m: &Vector2<f64>, state: &PlantState) -> DVector<f64> {
    let n = state.q.len() / 2;
    let mut z = DVector::zeros(4 * n + 2);
    z[0] = m[0];
    z[1] = m[1];
    z.rows_mut(2, 2 * n).copy_from(&state.q);
    z.rows_mut(2 + 2 * n, 2 * n).copy_from(&state.xi);
    z
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-5;

pub fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / an.abs().max(1.0)
}

pub fn central_difference(f: impl Fn(&DVector<f64>) -> DVector<f64>, z: &DVector<f64>, c: usize) -> DVector<f64> {
    let mut zp = z.clone();
    let mut zm = z.clone();
    zp[c] += FD_STEP;
    zm[c] -= FD_STEP;
    (f(&zp) - f(&zm)) / (2.0 * FD_STEP)
}

/// Worst relative error per row kind: (lin, soc, h, f).
pub fn gradient_errors(p: &LocalProblem, z: &DVector<f64>) -> (f64, f64, f64, f64) {
    let jg = p.eval_g_gradient(z);
    let jh = p.h_gradient();
    let (_, gf) = p.eval_f(z);
    let (mut lin, mut soc, mut h, mut f) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for c in 0..z.len() {
        let dg = central_difference(|x| p.eval_g(x), z, c);
        for k in 0..dg.len() {
            let e = rel_err(dg[k], jg[(k, c)]);
            if k % 2 == 0 {
                lin = lin.max(e);
            } else {
                soc = soc.max(e);
            }
        }
        let dh = central_difference(|x| p.eval_h(x), z, c);
        for k in 0..4 {
            h = h.max(rel_err(dh[k], jh[(k, c)]));
        }
        let df = central_difference(|x| DVector::from_element(1, p.eval_f(x).0), z, c);
        f = f.max(rel_err(df[0], gf[c]));
    }
    (lin, soc, h, f)
}
