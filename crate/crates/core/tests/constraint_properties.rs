mod common;

use common::{ball_center, gradient_errors, pinned_z, random_problem, uniform, FD_REL_TOL};
use nalgebra::{DVector, Vector2};
use netgov::plant::PlantState;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn gradients_match_central_differences(seed in any::<u64>(), n in 1usize..=5) {
        let mut rng = StdRng::seed_from_u64(seed);
        let rp = random_problem(&mut rng, n);
        let z = uniform(&mut rng, -3.0, 3.0, 4 * n + 2);
        for p in &rp.problems {
            let (lin, soc, h, f) = gradient_errors(p, &z);
            prop_assert!(lin < FD_REL_TOL, "lin rows {lin:e}");
            prop_assert!(soc < FD_REL_TOL, "soc rows {soc:e}");
            prop_assert!(h < FD_REL_TOL, "h {h:e}");
            prop_assert!(f < FD_REL_TOL, "f {f:e}");
        }
    }

    #[test]
    fn weighted_gradient_matches_jacobian(seed in any::<u64>(), n in 1usize..=5) {
        let mut rng = StdRng::seed_from_u64(seed);
        let rp = random_problem(&mut rng, n);
        let z = uniform(&mut rng, -3.0, 3.0, 4 * n + 2);
        for p in &rp.problems {
            let w = uniform(&mut rng, 0.0, 2.0, p.num_inequalities());
            let mut out = DVector::zeros(z.len());
            p.add_g_gradient_weighted(&z, &w, 1.0, &mut out);
            let expected = p.eval_g_gradient(&z).transpose() * &w;
            prop_assert!((out - expected).amax() < 1e-12);
        }
    }
}

#[test]
fn every_component_is_convex() {
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.random_range(1..=5);
        let rp = random_problem(&mut rng, n);
        let z1 = uniform(&mut rng, -3.0, 3.0, 4 * n + 2);
        let z2 = uniform(&mut rng, -3.0, 3.0, 4 * n + 2);
        let t: f64 = rng.random_range(0.0..1.0);
        let zt = &z1 * t + &z2 * (1.0 - t);
        for p in &rp.problems {
            let (g1, g2, gt) = (p.eval_g(&z1), p.eval_g(&z2), p.eval_g(&zt));
            for k in 0..gt.len() {
                assert!(
                    gt[k] <= t * g1[k] + (1.0 - t) * g2[k] + 1e-9,
                    "component {k} is not convex"
                );
            }
            let (f1, f2, ft) = (p.eval_f(&z1).0, p.eval_f(&z2).0, p.eval_f(&zt).0);
            assert!(ft <= t * f1 + (1.0 - t) * f2 + 1e-9);
        }
    }
}

fn random_ball_point(rng: &mut StdRng, center: &DVector<f64>, radius: f64, on_boundary: bool) -> DVector<f64> {
    let d = center.len();
    let dir = loop {
        let v = uniform(rng, -1.0, 1.0, d);
        let norm = v.norm();
        if norm > 1e-3 {
            break v / norm;
        }
    };
    let rho = if on_boundary {
        radius
    } else {
        radius * rng.random_range(0.0f64..1.0).powf(1.0 / d as f64)
    };
    center + dir * rho
}

#[test]
fn feasible_balls_lie_inside_the_constraint_set() {
    let mut rng = StdRng::seed_from_u64(11);
    let mut feasible_configs = 0;
    let mut samples = 0;
    let mut attempts = 0;
    while feasible_configs < 50 {
        attempts += 1;
        assert!(attempts < 200_000, "could not generate feasible configurations");
        let n = rng.random_range(1..=5);
        let mut rp = random_problem(&mut rng, n);
        let m = Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let bias = rp.bias_aware.then_some(&rp.bias);
        let center = ball_center(&m, n, bias);
        let x = &center + uniform(&mut rng, -0.3, 0.3, 4 * n);
        let state = PlantState::new(x.rows(0, 2 * n).into(), x.rows(2 * n, 2 * n).into());
        for p in rp.problems.iter_mut() {
            let i = p.agent();
            p.set_measurement(state.position(i), state.integral(i));
        }
        let z = pinned_z(&m, &state);
        if !rp.problems.iter().all(|p| p.eval_g(&z).iter().all(|&g| g <= 0.0)) {
            continue;
        }
        feasible_configs += 1;
        let radius = (&center - &x).norm();
        for s in 0..20 {
            let xp = random_ball_point(&mut rng, &center, radius, s % 2 == 0);
            for p in &rp.problems {
                let set = p.constraints();
                assert!(
                    set.max_violation(&xp, &m) <= 1e-9,
                    "ball point violates agent {} constraints by {:e}",
                    p.agent(),
                    set.max_violation(&xp, &m)
                );
            }
            samples += 1;
        }
    }
    assert_eq!(samples, 1000);
}

#[test]
fn at_the_ball_center_soc_rows_reduce_to_scaled_linear_rows() {
    let mut rng = StdRng::seed_from_u64(13);
    for _ in 0..200 {
        let n = rng.random_range(1..=5);
        let rp = random_problem(&mut rng, n);
        let m = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let center = ball_center(&m, n, rp.bias_aware.then_some(&rp.bias));
        let mut z = DVector::zeros(4 * n + 2);
        z[0] = m[0];
        z[1] = m[1];
        z.rows_mut(2, 4 * n).copy_from(&center);
        for p in &rp.problems {
            let g = p.eval_g(&z);
            let set = p.constraints();
            for l in 0..set.rows() {
                let row_norm = set.a.row(l).norm();
                let lin = g[2 * l];
                // lin_l is A⁽ˡ⁾ c(m) - b⁽ˡ⁾ - B⁽ˡ⁾ m, so it is ≤ 0 iff the centre is inside
                let direct = (set.a.row(l) * &center)[0] - set.b[l] - (set.b_ref.row(l) * m)[0];
                assert!((lin - direct).abs() < 1e-9 * direct.abs().max(1.0));
                assert!((g[2 * l + 1] - lin / row_norm).abs() < 1e-12 * lin.abs().max(1.0));
            }
            let jac = p.eval_g_gradient(&z);
            for l in 0..set.rows() {
                for c in 2..z.len() {
                    assert_eq!(jac[(2 * l + 1, c)], 0.0);
                }
            }
        }
    }
}

#[test]
fn input_rows_reproduce_the_plant_input() {
    use netgov::plant::{Plant, PlantParams};
    let mut rng = StdRng::seed_from_u64(17);
    for _ in 0..50 {
        let n = rng.random_range(2..=5);
        let rp = random_problem(&mut rng, n);
        let plant = Plant::new(
            rp.topology.clone(),
            PlantParams {
                alpha_r: rp.alpha_r,
                dt: 1e-3,
                formation_bias: rp.bias.clone(),
            },
        )
        .unwrap();
        let r = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let x = DVector::from_iterator(4 * n, rp.state.q.iter().chain(rp.state.xi.iter()).copied());
        for p in &rp.problems {
            let i = p.agent();
            let Some(poly) = &rp.polytopes[i] else { continue };
            let u = plant.input(&rp.state, &r, i).unwrap();
            let set = p.constraints();
            let base = set.obstacle_rows;
            for (row, (a, b)) in poly.a.iter().zip(&poly.b).enumerate() {
                let l = base + row;
                let lhs = (set.a.row(l) * &x)[0] - set.b[l] - (set.b_ref.row(l) * r)[0];
                let direct = a[0] * u[0] + a[1] * u[1] - b;
                assert!((lhs - direct).abs() < 1e-9, "agent {i} row {row}");
            }
        }
    }
}
