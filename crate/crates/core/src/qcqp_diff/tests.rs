use super::instances::*;
use super::*;
use crate::linalg::{SparseMat, SparseVec};
use crate::qcqp::{QuadForm, SolverOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn sol(p: &QcqpProblem, z: &[f64], nu: &[f64], lambda: &[f64]) -> QcqpSolution {
    QcqpSolution::from_point(p, z.to_vec(), nu.to_vec(), lambda.to_vec(), SolveStatus::Optimal, 1e-7)
}

fn identity_qp(q0: &[f64]) -> (QcqpProblem, QcqpSolution) {
    let mut p = QcqpProblem::new(2);
    p.p0 = SparseMat::diagonal(&[1.0, 1.0]);
    p.q0 = SparseVec::from_dense(q0);
    let z: Vec<f64> = q0.iter().map(|v| -v).collect();
    let s = sol(&p, &z, &[], &[]);
    (p, s)
}

#[test]
fn unconstrained_matrix_is_p0() {
    let mut p = QcqpProblem::new(2);
    p.p0 = SparseMat::from_dense(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]));
    let s = sol(&p, &[0.0, 0.0], &[], &[]);
    let m = build_kkt_matrix(&p, &s).unwrap().matrix();
    assert_eq!(m, DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]));
}

#[test]
fn circle_matrix() {
    let (p, s) = circle();
    let kkt = build_kkt_matrix(&p, &s).unwrap();
    assert_eq!(kkt.matrix(), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 0.0]));
    assert!(!kkt.singular);
    assert!(kkt.sigma_min_ratio > 0.1);
}

#[test]
fn inactive_inequality_row() {
    // min ½‖z‖² s.t. z₁ − 1 ≤ 0, inactive at z = 0.
    let mut p = QcqpProblem::new(2);
    p.p0 = SparseMat::diagonal(&[1.0, 1.0]);
    p.inequalities.push(QuadForm::linear(SparseVec::from_dense(&[1.0, 0.0]), -1.0));
    let s = sol(&p, &[0.0, 0.0], &[0.0], &[]);
    let m = build_kkt_matrix(&p, &s).unwrap().matrix();
    assert_eq!(m.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, -1.0]);

    let g = backward(&p, &s, &[1.0, 2.0]).unwrap();
    assert_eq!(g.g_r(0), 0.0);
    assert_eq!(g.g_q(0), vec![0.0, 0.0]);
    assert_eq!(g.g_p(0), DMatrix::zeros(2, 2));
    // The adjoint itself is not zero: the ν column carries ∇c.
    assert_eq!(g.d_nu[0], -1.0);
}

#[test]
fn unconstrained_backward() {
    let (p, s) = identity_qp(&[0.0, 0.0]);
    let g = backward(&p, &s, &[1.0, 0.0]).unwrap();
    assert_eq!(g.d_z, vec![-1.0, 0.0]);
    assert_eq!(g.g_q0(), vec![-1.0, 0.0]);
    assert!(!g.subgradient);

    let (p, s) = identity_qp(&[-1.0, -1.0]);
    let g = backward(&p, &s, &[1.0, 0.0]).unwrap();
    let want = DMatrix::from_row_slice(2, 2, &[-1.0, -0.5, -0.5, 0.0]);
    assert_eq!(g.g_p0(), want);
    // Contracted with a symmetric perturbation this agrees with the plain
    // outer product z d_zᵀ.
    let outer = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -1.0, 0.0]);
    let sym_dp = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.7, -0.2]);
    assert!((g.g_p0().dot(&sym_dp) - outer.dot(&sym_dp)).abs() < 1e-15);
}

#[test]
fn circle_gradients() {
    let (p, s) = circle();
    // ½z² + g = 0 gives z dz + dg = 0, so dz/dg = −1/z* = 1 on the z* = −1 branch.
    let g = backward(&p, &s, &[1.0]).unwrap();
    assert!((g.g_g(0) - 1.0).abs() < 1e-14);

    let dp = Param::G(0).unit_differential(&p);
    let (dz, _, dl) = forward_differential(&p, &s, &dp).unwrap();
    assert!((dz[0] - 1.0).abs() < 1e-14);
    // λ* = −1/z* as well, so dλ = dz.
    assert!((dl[0] - 1.0).abs() < 1e-14);

    let report = finite_diff_check(&p, &s, &LinearLoss { c: vec![1.0] }, 1e-6, &[Param::G(0)], &SolverOptions::default())
        .unwrap();
    let e = &report.entries[0];
    assert!(e.rel_err.unwrap() <= 1e-5, "{e:?}");
    assert!((e.numeric.unwrap() - 1.0).abs() < 1e-5);
}

#[test]
fn forward_examples() {
    let (p, s) = identity_qp(&[0.0, 0.0]);
    let zero = Param::Q0(0).unit_differential(&p);
    let mut zero2 = zero.clone();
    Param::Q0(0).perturb(&mut zero2, -1.0);
    assert_eq!(forward_differential(&p, &s, &zero2).unwrap().0, vec![0.0, 0.0]);
    assert_eq!(forward_differential(&p, &s, &zero).unwrap().0, vec![-1.0, 0.0]);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (p, s) = circle();
    let g = backward(&p, &s, &[0.0]).unwrap().to_dense();
    assert!(g.g_p0.iter().all(|v| *v == 0.0));
    assert_eq!(g.g_g, vec![0.0]);
    assert!(g.g_d[0].iter().all(|v| *v == 0.0));
    assert!(g.g_h[0].iter().all(|v| *v == 0.0));
}

#[test]
fn refuses_bad_solutions() {
    let (p, mut s) = circle();
    s.status = SolveStatus::Infeasible;
    assert!(matches!(backward(&p, &s, &[1.0]), Err(DiffError::UnusableSolution { .. })));
    s.status = SolveStatus::MaxIter;
    s.kkt_residual = 1e-3;
    assert!(backward(&p, &s, &[1.0]).is_err());
    s.kkt_residual = 1e-6;
    assert!(backward(&p, &s, &[1.0]).is_ok());
    assert!(matches!(backward(&p, &circle().1, &[1.0, 2.0]), Err(DiffError::Dimension(_))));
}

#[test]
fn duplicated_constraint_takes_least_norm_path() {
    let (p, s) = duplicated_constraint();
    let kkt = build_kkt_matrix(&p, &s).unwrap();
    assert!(kkt.singular);
    assert!(forward_differential(&p, &s, &Param::R(0).unit_differential(&p)).is_err());

    let grad = [1.0, 0.0];
    let g = backward(&p, &s, &grad).unwrap();
    assert!(g.subgradient);
    let d: Vec<f64> = g.d_z.iter().chain(&g.d_nu).copied().collect();
    let m = kkt.matrix();
    let res = m.transpose() * nalgebra::DVector::from_column_slice(&d);
    assert!((res[0] + 1.0).abs() < 1e-10 && res[1].abs() < 1e-10 && res[2].abs() < 1e-10 && res[3].abs() < 1e-10);
    // Minimal norm: orthogonal to the null space of Mᵀ.
    let null = linalg::null_space(&m.transpose(), 1e-10);
    assert!(null.ncols() >= 1);
    for c in null.column_iter() {
        let proj: f64 = c.iter().zip(&d).map(|(a, b)| a * b).sum();
        assert!(proj.abs() < 1e-10, "{proj}");
    }
    // Symmetric split of the two duals.
    assert!((g.d_nu[0] - g.d_nu[1]).abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transpose_consistency(seed in 0u64..100_000) {
        let p = random_instance(seed);
        let Some(s) = regular_solution(&p) else { return Ok(()); };
        let kkt = build_kkt_matrix(&p, &s).unwrap();
        prop_assume!(!kkt.singular);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let grad: Vec<f64> = (0..p.k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = backward_with(&kkt, &s, &grad).unwrap();
        for param in Param::all(&p) {
            let (dz, _, _) = forward_with(&kkt, &s, &param.unit_differential(&p)).unwrap();
            let fwd: f64 = grad.iter().zip(&dz).map(|(a, b)| a * b).sum();
            let scale = 1.0f64.max(fwd.abs());
            prop_assert!((fwd - g.get(param)).abs() <= 1e-10 * scale, "{param:?}: {fwd} vs {}", g.get(param));
        }
    }

    #[test]
    fn finite_differences_agree(seed in 0u64..100_000) {
        let p = random_instance(seed);
        let Some(s) = regular_solution(&p) else { return Ok(()); };
        let loss = QuadraticLoss { target: vec![0.3; p.k], weight: 1.0 };
        let opts = SolverOptions { kkt_tol: 1e-12, ..Default::default() };
        let report = finite_diff_check(&p, &s, &loss, 1e-6, &Param::all(&p), &opts).unwrap();
        prop_assert!(report.pass_fraction(1e-4) >= 0.95, "max err {}", report.max_rel_err());
    }
}

