//! Solve a small non-convex QCQP with the interior-point solver and inspect
//! the KKT residuals and regularity at the answer.
//!
//! ```text
//! cargo run --example solve_qcqp
//! ```

use acopf_learn::linalg::{SparseMat, SparseVec};
use acopf_learn::qcqp::{check_regularity, kkt_components, solve, QcqpProblem, QuadForm, SolverOptions};

fn main() {
    // min (z₁ − 2)² + (z₂ − 1)²  s.t.  z₁² + z₂² = 1,  z₁ − z₂ ≤ 0.5
    let mut p = QcqpProblem::new(2);
    p.p0 = SparseMat::diagonal(&[2.0, 2.0]);
    p.q0 = SparseVec::from_dense(&[-4.0, -2.0]);
    p.equalities.push(QuadForm::new(SparseMat::diagonal(&[2.0, 2.0]), SparseVec::zeros(2), -1.0));
    p.inequalities.push(QuadForm::linear(SparseVec::from_dense(&[1.0, -1.0]), -0.5));

    let sol = solve(&p, None, &SolverOptions::default()).expect("well-formed problem");
    println!("status {:?} after {} iterations", sol.status, sol.iterations);
    println!("z* = ({:.8}, {:.8})", sol.z[0], sol.z[1]);
    println!("equality multipliers {:?}, inequality multipliers {:?}", sol.lambda, sol.nu);
    println!("objective {:.8}", p.eval_objective(&sol.z).unwrap() + 5.0);

    let k = kkt_components(&p, &sol.z, &sol.nu, &sol.lambda);
    println!("KKT residual {:.2e} ({k:?})", k.max());
    let reg = check_regularity(&p, &sol, 1e-6);
    println!("regularity: {reg:?}");
}
