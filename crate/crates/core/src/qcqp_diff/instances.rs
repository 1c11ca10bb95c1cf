//! Small test problems with known structure, shared by the test suites and
//! the `gradcheck` command.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};

use crate::linalg::{SparseMat, SparseVec};
use crate::qcqp::{check_regularity, solve, QcqpProblem, QcqpSolution, QuadForm, SolveStatus, SolverOptions};

fn at(p: &QcqpProblem, z: &[f64], nu: &[f64], lambda: &[f64]) -> QcqpSolution {
    QcqpSolution::from_point(p, z.to_vec(), nu.to_vec(), lambda.to_vec(), SolveStatus::Optimal, 1e-7)
}

/// `min z` s.t. `½z² − ½ = 0`, at its minimizer `z* = −1`, `λ* = 1`.
pub fn circle() -> (QcqpProblem, QcqpSolution) {
    let mut p = QcqpProblem::new(1);
    p.q0 = SparseVec::from_dense(&[1.0]);
    p.equalities.push(QuadForm::new(SparseMat::diagonal(&[1.0]), SparseVec::zeros(1), -0.5));
    let s = at(&p, &[-1.0], &[], &[1.0]);
    (p, s)
}

/// `min ½‖z‖²` s.t. `2 − z₁ − z₂ ≤ 0` stated twice, at `z* = (1, 1)` with
/// the duals split evenly. LICQ fails, so the KKT matrix is singular.
pub fn duplicated_constraint() -> (QcqpProblem, QcqpSolution) {
    let mut p = QcqpProblem::new(2);
    p.p0 = SparseMat::diagonal(&[1.0, 1.0]);
    let c = QuadForm::linear(SparseVec::from_dense(&[-1.0, -1.0]), 2.0);
    p.inequalities.push(c.clone());
    p.inequalities.push(c);
    let s = at(&p, &[1.0, 1.0], &[0.5, 0.5], &[]);
    (p, s)
}

/// Random problem with `k ≤ 6`, `m_I ≤ 3`, `m_E ≤ 2`: a convex objective,
/// convex inequalities (stored with skew parts that do not change the
/// function) and indefinite equalities.
pub fn random_instance(seed: u64) -> QcqpProblem {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=6usize);
    let m_i = rng.random_range(0..=3usize);
    let m_e = rng.random_range(0..=2usize.min(k - 1));
    let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let psd = |r: &mut dyn FnMut(f64, f64) -> f64, shift: f64| {
        let a = DMatrix::from_fn(k, k, |_, _| r(-1.0, 1.0));
        let skew = DMatrix::from_fn(k, k, |_, _| r(-0.5, 0.5));
        &a * a.transpose() + DMatrix::identity(k, k) * shift + (&skew - skew.transpose())
    };
    let mut p = QcqpProblem::new(k);
    p.p0 = SparseMat::from_dense(&psd(&mut r, 1.0));
    p.q0 = SparseVec::from_dense(&(0..k).map(|_| r(-2.0, 2.0)).collect::<Vec<_>>());
    for _ in 0..m_i {
        let m = psd(&mut r, 0.1) * 0.3;
        let q: Vec<f64> = (0..k).map(|_| r(-1.0, 1.0)).collect();
        p.inequalities.push(QuadForm::from_dense(&m, &q, r(-1.0, -0.05)));
    }
    for _ in 0..m_e {
        let m = DMatrix::from_fn(k, k, |_, _| r(-0.2, 0.2));
        let h: Vec<f64> = (0..k).map(|_| r(-1.0, 1.0)).collect();
        p.equalities.push(QuadForm::from_dense(&m, &h, r(-0.3, 0.3)));
    }
    p
}

/// Solves `p` tightly and keeps the solution only if it is regular (LICQ,
/// strict complementarity, second-order condition) and every inequality is
/// clearly active or clearly inactive.
pub fn regular_solution(p: &QcqpProblem) -> Option<QcqpSolution> {
    let opts = SolverOptions { kkt_tol: 1e-12, ..Default::default() };
    let s = solve(p, None, &opts).ok()?;
    if s.status != SolveStatus::Optimal || s.kkt_residual > 1e-10 {
        return None;
    }
    // Weakly active constraints make central differences straddle a kink.
    let (ineq, _) = p.eval_constraints(&s.z).ok()?;
    let clear = ineq.iter().zip(&s.nu).all(|(c, n)| *n > 1e-3 || *c < -1e-3);
    (clear && check_regularity(p, &s, 1e-3).all()).then_some(s)
}
