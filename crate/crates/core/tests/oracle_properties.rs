mod common;

use common::{admissible, inadmissible, pinned_z, random_problem};
use nalgebra::Vector2;
use netgov::constraints::LocalProblem;
use netgov::oracle::{bounding_box, grid_project, pinned_optimum, recover_multipliers, OracleOptions, OracleResult};
use netgov::plant::PlantState;
use netgov::solver::kkt_breakdown_at;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn worst(problems: &[LocalProblem], state: &PlantState, m: &Vector2<f64>) -> f64 {
    let z = pinned_z(m, state);
    problems
        .iter()
        .filter(|p| p.num_inequalities() > 0)
        .map(|p| p.eval_g(&z).max())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Every feasible lattice point in `[lo, hi]` with spacing `h`.
fn lattice(problems: &[LocalProblem], state: &PlantState, lo: Vector2<f64>, hi: Vector2<f64>, h: f64) -> Vec<Vector2<f64>> {
    let nx = ((hi[0] - lo[0]) / h).floor() as i64;
    let ny = ((hi[1] - lo[1]) / h).floor() as i64;
    let mut out = Vec::new();
    for ix in 0..=nx {
        for iy in 0..=ny {
            let m = Vector2::new(lo[0] + ix as f64 * h, lo[1] + iy as f64 * h);
            if worst(problems, state, &m) <= 0.0 {
                out.push(m);
            }
        }
    }
    out
}

fn check_against_lattice(result: &OracleResult, r: &Vector2<f64>, feasible: &[Vector2<f64>]) {
    for m in feasible {
        assert!(
            (r - m).norm_squared() >= result.objective - 1e-12,
            "lattice point {m:?} beats the oracle ({} < {})",
            (r - m).norm_squared(),
            result.objective
        );
    }
}

#[test]
fn coarse_grid_search_is_exhaustive() {
    let mut rng = StdRng::seed_from_u64(5);
    let h = 0.05;
    for _ in 0..20 {
        let n = rng.random_range(1..=4);
        let rp = random_problem(&mut rng, n);
        let r = rp.problems[0].reference();
        let result = grid_project(&r, &rp.state, &rp.problems, &rp.halfspaces, &OracleOptions::coarse(h));
        let (lo, hi) = bounding_box(&r, &rp.state, &rp.halfspaces, 2.0);
        let feasible = lattice(&rp.problems, &rp.state, lo, hi, h);
        if worst(&rp.problems, &rp.state, &r) <= 0.0 {
            assert_eq!(result.m_star, r);
            continue;
        }
        assert_eq!(result.feasible, !feasible.is_empty());
        if feasible.is_empty() {
            continue;
        }
        check_against_lattice(&result, &r, &feasible);
        assert!(feasible.contains(&result.m_star), "incumbent is not a lattice point");
    }
}

#[test]
fn refined_optimum_beats_any_fine_lattice() {
    let mut rng = StdRng::seed_from_u64(6);
    let mut checked = 0;
    while checked < 10 {
        let n = rng.random_range(1..=4);
        let rp = random_problem(&mut rng, n);
        let r = rp.problems[0].reference();
        let result = grid_project(&r, &rp.state, &rp.problems, &rp.halfspaces, &OracleOptions::default());
        if !result.feasible || result.m_star == r {
            continue;
        }
        checked += 1;
        assert!(worst(&rp.problems, &rp.state, &result.m_star) <= 0.0);
        let (lo, hi) = bounding_box(&r, &rp.state, &rp.halfspaces, 2.0);
        // an offset lattice the oracle never visits
        let feasible = lattice(&rp.problems, &rp.state, lo.add_scalar(0.0037), hi, 0.013);
        check_against_lattice(&result, &r, &feasible);
    }
}

#[test]
fn refinement_never_increases_the_objective() {
    let mut rng = StdRng::seed_from_u64(8);
    for _ in 0..20 {
        let n = rng.random_range(1..=4);
        let rp = random_problem(&mut rng, n);
        let r = rp.problems[0].reference();
        let result = grid_project(&r, &rp.state, &rp.problems, &rp.halfspaces, &OracleOptions::default());
        for w in result.level_objectives.windows(2) {
            assert!(w[1] <= w[0], "levels {:?}", result.level_objectives);
        }
    }
}

#[test]
fn feasible_reference_is_returned_unchanged() {
    let cfg = admissible();
    let state = cfg.initial_state();
    let r = Vector2::new(-0.5, -0.5);
    let problems = cfg.build_problems(&state, r).unwrap();
    let result = grid_project(&r, &state, &problems, &cfg.scene_halfspaces(), &OracleOptions::default());
    assert_eq!(result.m_star, r);
    assert_eq!(result.objective, 0.0);
}

#[test]
fn static_problem_matches_the_recorded_optimum() {
    let golden: serde_json::Value =
        serde_json::from_str(include_str!("../../../scenarios/ring5_admissible.oracle.json")).unwrap();
    let expected = Vector2::new(
        golden["m_star"][0].as_f64().unwrap(),
        golden["m_star"][1].as_f64().unwrap(),
    );
    let cfg = admissible();
    let state = cfg.initial_state();
    let r = cfg.reference_at(0.0);
    let problems = cfg.build_problems(&state, r).unwrap();
    let mut result = grid_project(&r, &state, &problems, &cfg.scene_halfspaces(), &OracleOptions::default());
    assert!((result.m_star - expected).amax() < 1e-9, "m* = {:?}", result.m_star);
    result.multipliers = recover_multipliers(&result, &state, &problems);
    let mult = result.multipliers.clone().unwrap();
    assert!(mult.lambda.iter().all(|l| l.iter().all(|&v| v >= 0.0)));
    let kkt = kkt_breakdown_at(&pinned_optimum(&result, &state), &mult.lambda, &mult.nu, &problems);
    assert!(kkt.max() < 1e-5, "{kkt:?}");
}

#[test]
fn inadmissible_reference_is_projected_onto_the_constraint() {
    let cfg = inadmissible();
    let state = cfg.initial_state();
    let r = cfg.reference_at(0.0);
    let problems = cfg.build_problems(&state, r).unwrap();
    let result = grid_project(&r, &state, &problems, &cfg.scene_halfspaces(), &OracleOptions::default());
    assert!(result.feasible);
    assert!(!result.active_rows.is_empty());
    assert!(result.m_star[0] + result.m_star[1] < 3.0);
}
