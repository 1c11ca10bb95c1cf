use super::*;
use crate::cases;
use nalgebra::Complex;
use proptest::prelude::*;

/// Hand-built operating point of the 2-bus fixture: pick the voltages, get the
/// branch powers from `S = V · conj(I)` and set the generators to balance.
fn two_bus_point(v2: f64, theta2: f64) -> (Network, ControlVector, StateVector) {
    let net = cases::two_bus();
    let br = &net.branches[0];
    let y = Complex::new(1.0, 0.0) / Complex::new(br.series_r, br.series_x);
    let v1 = Complex::new(1.0, 0.0);
    let v2c = Complex::from_polar(v2, theta2);
    let s12 = v1 * (y * (v1 - v2c)).conj();
    let s21 = v2c * (y * (v2c - v1)).conj();
    let (pd2, qd2) = (net.buses[1].p_demand, net.buses[1].q_demand);
    let control = ControlVector { p_gen: vec![s12.re, s21.re + pd2], v_mag: vec![v2] };
    let state = StateVector {
        q_gen: vec![s12.im, s21.im + qd2],
        e: vec![1.0, v2c.re],
        f: vec![0.0, v2c.im],
        p_fwd: vec![s12.re],
        q_fwd: vec![s12.im],
        p_rev: vec![s21.re],
        q_rev: vec![s21.im],
    };
    (net, control, state)
}

#[test]
fn constraint_counts() {
    for net in [cases::two_bus(), cases::case30()] {
        let p = build_acopf_qcqp(&net, &net.nominal_load()).unwrap();
        let (b, l, g) = (net.n_bus(), net.n_branch(), net.n_gen());
        assert_eq!(p.k, g + net.state_layout().len());
        assert_eq!(p.m_e(), 2 * b + 4 * l + 2);
        assert_eq!(p.m_i(), 2 * l + 2 * b + 4 * g);
    }
}

#[test]
fn hand_point_satisfies_equalities() {
    let (net, yc, ys) = two_bus_point(0.98, -0.03);
    let p = build_acopf_qcqp(&net, &net.nominal_load()).unwrap();
    let (ineq, eq) = p.eval_constraints(&assemble_solution(&yc, &ys)).unwrap();
    assert!(eq.iter().all(|v| v.abs() < 1e-12), "{eq:?}");
    assert!(ineq.iter().all(|v| *v <= 0.0), "{ineq:?}");

    let rep = feasibility_check(&net, &net.nominal_load(), &yc, &ys, 1e-6).unwrap();
    assert!(rep.feasible, "{rep:?}");

    let mut bumped = net.nominal_load();
    bumped.values[1] += 1.0;
    let rep = feasibility_check(&net, &bumped, &yc, &ys, 1e-6).unwrap();
    assert!(!rep.feasible);
    assert!((rep.p_balance.max - 1.0).abs() < 1e-12);
}

#[test]
fn cost_examples() {
    let net = cases::two_bus();
    assert_eq!(generation_cost(&net, &[0.0, 0.0]).unwrap(), 0.0);
    let mut one = net.clone();
    one.generators[0].c2 = 2.0;
    one.generators[0].c1 = 3.0;
    assert_eq!(generation_cost(&one, &[0.5, 0.0]).unwrap(), 2.0);
    assert!(generation_cost(&net, &[0.0]).is_err());
}

#[test]
fn penalty_examples() {
    let (net, _, ys) = two_bus_point(0.98, -0.03);
    let (v, g) = penalty_r_cs(&net, &ys).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.to_vec().iter().all(|x| *x == 0.0));

    let mut low = ys.clone();
    low.q_gen[0] = net.generators[0].q_min - 0.5;
    let (v, g) = penalty_r_cs(&net, &low).unwrap();
    assert!((v - 0.5).abs() < 1e-15);
    assert_eq!(g.q_gen[0], -1.0);

    let mut line = net.clone();
    line.branches[0].s_max = 4.0;
    let mut hot = ys;
    hot.p_fwd[0] = 3.0;
    hot.q_fwd[0] = 4.0;
    let (v, g) = penalty_r_cs(&line, &hot).unwrap();
    assert!((v - 9.0).abs() < 1e-12);
    assert_eq!((g.p_fwd[0], g.q_fwd[0]), (6.0, 8.0));
}

#[test]
fn projection_examples() {
    let net = cases::two_bus();
    let inside = ControlVector { p_gen: vec![0.5, 0.5], v_mag: vec![1.0] };
    assert_eq!(project_control_to_box(&net, &inside).unwrap(), inside);
    let out = ControlVector { p_gen: vec![-1.0, 0.5], v_mag: vec![1.2] };
    let proj = project_control_to_box(&net, &out).unwrap();
    assert_eq!(proj.p_gen[0], net.generators[0].p_min);
    assert_eq!(proj.v_mag[0], net.buses[1].v_max);
}

#[test]
fn split_examples() {
    let net = cases::case30();
    let z = flat_start(&net);
    let (yc, ys) = split_solution(&net, &z).unwrap();
    assert_eq!(yc.len(), 11);
    assert!(yc.v_mag.iter().all(|v| *v == 1.0));
    assert_eq!(assemble_solution(&yc, &ys), z);
}

#[test]
fn two_bus_acopf_solves() {
    let net = cases::two_bus();
    let sol = solve_acopf(&net, &net.nominal_load(), &SolverOptions::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!(sol.kkt_residual <= 1e-8);
    let rep = feasibility_check(&net, &net.nominal_load(), &sol.control, &sol.state, 1e-6).unwrap();
    assert!(rep.feasible, "{rep:?}");
}

proptest! {
    #[test]
    fn split_round_trip(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let net = cases::case30();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..AcopfLayout::new(&net).len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (yc, ys) = split_solution(&net, &z).unwrap();
        prop_assert_eq!(assemble_solution(&yc, &ys), z);
        for (&b, &v) in net.pv_buses.iter().zip(&yc.v_mag) {
            prop_assert!((v * v - ys.e[b].powi(2) - ys.f[b].powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_properties(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let net = cases::case30();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let lay = net.state_layout();
        let v: Vec<f64> = (0..lay.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ys = StateVector::from_slice(lay, &v).unwrap();
        let (val, grad) = penalty_r_cs(&net, &ys).unwrap();
        prop_assert!(val >= 0.0);
        let g = grad.to_vec();
        let h = 1e-7;
        for j in 0..lay.len() {
            let mut up = v.clone();
            let mut dn = v.clone();
            up[j] += h;
            dn[j] -= h;
            let fu = penalty_r_cs(&net, &StateVector::from_slice(lay, &up).unwrap()).unwrap().0;
            let fd = penalty_r_cs(&net, &StateVector::from_slice(lay, &dn).unwrap()).unwrap().0;
            let num = (fu - fd) / (2.0 * h);
            // Straddling a kink shows up as a half-slope; skip those entries.
            let kink = ((fu - val) - (val - fd)).abs() > 1e-9;
            prop_assert!(kink || (num - g[j]).abs() < 1e-6, "entry {j}: {num} vs {}", g[j]);
        }
        // Zero on the state set: project q into bounds and shrink flows.
        let mut inside = ys.clone();
        for (q, gen) in inside.q_gen.iter_mut().zip(&net.generators) {
            *q = q.clamp(gen.q_min, gen.q_max);
        }
        for l in 0..net.n_branch() {
            let s = net.branches[l].s_max;
            for (p, q) in [(&mut inside.p_fwd[l], &mut inside.q_fwd[l]), (&mut inside.p_rev[l], &mut inside.q_rev[l])] {
                let m = p.hypot(*q);
                if m > s {
                    *p *= s / m;
                    *q *= s / m;
                }
            }
        }
        prop_assert!(penalty_r_cs(&net, &inside).unwrap().0 <= 1e-12);
    }
}

#[test]
fn soft_solve_recovers_strict_optimum_from_zero_slack() {
    // The flat-start strict solve stalls on this load; the elastic problem
    // does not, and its zero-slack optimum seeds a strict re-solve.
    let net = cases::case30();
    let x = crate::cli::perturbed_load(&net, 0.2, 1, 0);
    let opts = SolverOptions::default();
    assert_ne!(solve_acopf(&net, &x, &opts).unwrap().status, SolveStatus::Optimal);
    let s = solve_acopf_soft(&net, &x, 1e4, &opts).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal);
    assert!(!s.softened);
    assert!(s.kkt_residual <= opts.kkt_tol);
    assert!(feasibility_check(&net, &x, &s.control, &s.state, 1e-6).unwrap().feasible);
}

#[test]
fn soft_solve_reports_slack_on_infeasible_load() {
    let net = cases::case30();
    let x = crate::cli::perturbed_load(&net, 0.1, 1, 20);
    let s = solve_acopf_soft(&net, &x, 1e4, &SolverOptions::default()).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal);
    assert!(s.softened);
    assert!(s.balance_slack_l1 > 1e-3, "{}", s.balance_slack_l1);
    let rep = feasibility_check(&net, &x, &s.control, &s.state, 1e-5).unwrap();
    assert!(!rep.feasible);
    assert!(rep.q_balance.max > 1e-3);
}
