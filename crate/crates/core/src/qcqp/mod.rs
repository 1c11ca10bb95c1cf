//! General quadratically constrained quadratic programs
//!
//! ```text
//! min  ½ zᵀP₀z + q₀ᵀz
//! s.t. ½ zᵀPᵢz + qᵢᵀz + rᵢ ≤ 0    (inequalities)
//!      ½ zᵀDⱼz + hⱼᵀz + gⱼ = 0    (equalities)
//! ```
//!
//! Matrices are stored exactly as given (not symmetrized); every gradient and
//! Hessian expression uses `½(P + Pᵀ)`.

mod ipm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, SparseMat, SparseVec};

pub use ipm::{solve, solve_warm, WarmStart};

#[derive(Debug, thiserror::Error)]
pub enum QcqpError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },
}

/// One quadratic function `½ zᵀMz + vᵀz + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadForm {
    pub mat: SparseMat,
    pub lin: SparseVec,
    pub constant: f64,
}

impl QuadForm {
    pub fn new(mat: SparseMat, lin: SparseVec, constant: f64) -> Self {
        Self { mat, lin, constant }
    }

    pub fn linear(lin: SparseVec, constant: f64) -> Self {
        Self { mat: SparseMat::zeros(lin.dim()), lin, constant }
    }

    pub fn from_dense(mat: &DMatrix<f64>, lin: &[f64], constant: f64) -> Self {
        Self { mat: SparseMat::from_dense(mat), lin: SparseVec::from_dense(lin), constant }
    }

    pub fn dim(&self) -> usize {
        self.lin.dim()
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        0.5 * self.mat.quad(z) + self.lin.dot(z) + self.constant
    }

    /// Accumulates `scale · ∇(·)(z)` into `out`.
    pub fn grad_acc(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        self.mat.sym_mul_acc(z, scale, out);
        self.lin.axpy_into(scale, out);
    }

    pub fn grad(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; z.len()];
        self.grad_acc(z, 1.0, &mut g);
        g
    }

    /// Gradient as sorted `(index, value)` pairs over its structural support.
    pub fn grad_sparse(&self, z: &[f64]) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(2 * self.mat.nnz() + self.lin.entries().len());
        for &(r, c, v) in self.mat.entries() {
            let h = 0.5 * v;
            out.push((r, h * z[c]));
            out.push((c, h * z[r]));
        }
        out.extend_from_slice(self.lin.entries());
        out.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(out.len());
        for (i, v) in out {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        merged
    }

    fn check_dim(&self, k: usize, what: &str) -> Result<(), QcqpError> {
        for (d, part) in [(self.mat.dim(), "matrix"), (self.lin.dim(), "vector")] {
            if d != k {
                return Err(QcqpError::Dimension { what: format!("{what} {part}"), expected: k, got: d });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcqpProblem {
    pub k: usize,
    pub p0: SparseMat,
    pub q0: SparseVec,
    /// `(Pᵢ, qᵢ, rᵢ)` stored as `(mat, lin, constant)`.
    pub inequalities: Vec<QuadForm>,
    /// `(Dⱼ, hⱼ, gⱼ)` stored as `(mat, lin, constant)`.
    pub equalities: Vec<QuadForm>,
}

impl QcqpProblem {
    pub fn new(k: usize) -> Self {
        Self { k, p0: SparseMat::zeros(k), q0: SparseVec::zeros(k), inequalities: Vec::new(), equalities: Vec::new() }
    }

    pub fn m_i(&self) -> usize {
        self.inequalities.len()
    }

    pub fn m_e(&self) -> usize {
        self.equalities.len()
    }

    pub fn validate(&self) -> Result<(), QcqpError> {
        QuadForm::new(self.p0.clone(), self.q0.clone(), 0.0).check_dim(self.k, "objective")?;
        for (i, c) in self.inequalities.iter().enumerate() {
            c.check_dim(self.k, &format!("inequality {i}"))?;
        }
        for (j, c) in self.equalities.iter().enumerate() {
            c.check_dim(self.k, &format!("equality {j}"))?;
        }
        Ok(())
    }

    fn check_point(&self, z: &[f64]) -> Result<(), QcqpError> {
        if z.len() != self.k {
            return Err(QcqpError::Dimension { what: "z".into(), expected: self.k, got: z.len() });
        }
        Ok(())
    }

    /// `½ zᵀP₀z + q₀ᵀz`, exactly as written.
    pub fn eval_objective(&self, z: &[f64]) -> Result<f64, QcqpError> {
        self.check_point(z)?;
        Ok(self.objective(z))
    }

    pub(crate) fn objective(&self, z: &[f64]) -> f64 {
        0.5 * self.p0.quad(z) + self.q0.dot(z)
    }

    pub(crate) fn objective_grad(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.k];
        self.p0.sym_mul_acc(z, 1.0, &mut g);
        self.q0.axpy_into(1.0, &mut g);
        g
    }

    pub fn eval_constraints(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>), QcqpError> {
        self.check_point(z)?;
        Ok(self.constraints(z))
    }

    pub(crate) fn constraints(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            self.inequalities.iter().map(|c| c.value(z)).collect(),
            self.equalities.iter().map(|c| c.value(z)).collect(),
        )
    }

    /// Gradient of the Lagrangian `f + Σνᵢcᵢ + Σλⱼcⱼ`.
    pub fn lagrangian_grad(&self, z: &[f64], nu: &[f64], lambda: &[f64]) -> Vec<f64> {
        let mut g = self.objective_grad(z);
        for (c, &n) in self.inequalities.iter().zip(nu) {
            if n != 0.0 {
                c.grad_acc(z, n, &mut g);
            }
        }
        for (c, &l) in self.equalities.iter().zip(lambda) {
            if l != 0.0 {
                c.grad_acc(z, l, &mut g);
            }
        }
        g
    }

    /// Symmetrized Lagrangian Hessian `Q = P₀ + Σνᵢ Pᵢ + Σλⱼ Dⱼ` (dense).
    pub fn lagrangian_hessian(&self, nu: &[f64], lambda: &[f64]) -> DMatrix<f64> {
        let k = self.k;
        let mut buf = vec![0.0; k * k];
        self.p0.sym_add_to(1.0, &mut buf, k, 0);
        for (c, &n) in self.inequalities.iter().zip(nu) {
            if n != 0.0 {
                c.mat.sym_add_to(n, &mut buf, k, 0);
            }
        }
        for (c, &l) in self.equalities.iter().zip(lambda) {
            if l != 0.0 {
                c.mat.sym_add_to(l, &mut buf, k, 0);
            }
        }
        DMatrix::from_row_slice(k, k, &buf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RestartPolicy {
    /// Perturbed restarts only after a failed attempt.
    #[default]
    OnFailure,
    /// Always run every restart and keep the best optimal point.
    Always,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub kkt_tol: f64,
    /// Newton-step budget shared by all restarts.
    pub max_iter: usize,
    pub n_restarts: usize,
    pub seed: u64,
    pub activity_tol: f64,
    pub restart_policy: RestartPolicy,
    /// Threshold on the elastic feasibility problem above which a failed
    /// solve is reported as infeasible.
    pub infeasibility_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iter: 200,
            n_restarts: 4,
            seed: 0,
            activity_tol: 1e-7,
            restart_policy: RestartPolicy::OnFailure,
            infeasibility_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcqpSolution {
    pub z: Vec<f64>,
    pub nu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub active_set: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
}

impl QcqpSolution {
    /// Assembles a solution record from a primal-dual triple, computing the
    /// residual, objective and active set.
    pub fn from_point(
        p: &QcqpProblem,
        z: Vec<f64>,
        nu: Vec<f64>,
        lambda: Vec<f64>,
        status: SolveStatus,
        activity_tol: f64,
    ) -> Self {
        let res = kkt_components(p, &z, &nu, &lambda);
        let (ineq, _) = p.constraints(&z);
        let active_set = ineq.iter().enumerate().filter(|(_, c)| c.abs() <= activity_tol).map(|(i, _)| i).collect();
        Self {
            objective: p.objective(&z),
            z,
            nu,
            lambda,
            status,
            kkt_residual: res.max(),
            active_set,
            iterations: 0,
        }
    }
}

/// Individual KKT residual terms; [`kkt_residual`] is their maximum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktComponents {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktComponents {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

pub fn kkt_components(p: &QcqpProblem, z: &[f64], nu: &[f64], lambda: &[f64]) -> KktComponents {
    let stationarity = linalg::norm_inf(&p.lagrangian_grad(z, nu, lambda));
    let (ineq, eq) = p.constraints(z);
    let primal = ineq.iter().fold(0.0f64, |m, &c| m.max(c)).max(linalg::norm_inf(&eq));
    let dual = nu.iter().fold(0.0f64, |m, &n| m.max(-n));
    let complementarity = nu.iter().zip(&ineq).fold(0.0f64, |m, (n, c)| m.max((n * c).abs()));
    let out = KktComponents { stationarity, primal, dual, complementarity };
    if out.max().is_nan() {
        KktComponents { stationarity: f64::INFINITY, ..out }
    } else {
        out
    }
}

/// Max of stationarity, primal violation, dual sign violation and complementarity.
pub fn kkt_residual(p: &QcqpProblem, s: &QcqpSolution) -> f64 {
    kkt_components(p, &s.z, &s.nu, &s.lambda).max()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regularity {
    pub licq: bool,
    pub strict_complementarity: bool,
    pub sosc: bool,
}

impl Regularity {
    pub fn all(&self) -> bool {
        self.licq && self.strict_complementarity && self.sosc
    }
}

/// Stacked gradients of active inequalities and all equalities (rows).
pub fn active_constraint_jacobian(p: &QcqpProblem, s: &QcqpSolution) -> DMatrix<f64> {
    let rows: Vec<&QuadForm> =
        s.active_set.iter().map(|&i| &p.inequalities[i]).chain(p.equalities.iter()).collect();
    let mut k = DMatrix::zeros(rows.len(), p.k);
    for (r, c) in rows.iter().enumerate() {
        for (j, v) in c.grad_sparse(&s.z) {
            k[(r, j)] += v;
        }
    }
    k
}

/// LICQ, strict complementarity and second-order sufficiency at `s`.
pub fn check_regularity(p: &QcqpProblem, s: &QcqpSolution, tol: f64) -> Regularity {
    let kmat = active_constraint_jacobian(p, s);
    let licq = if kmat.nrows() == 0 {
        true
    } else if kmat.nrows() > p.k {
        false
    } else {
        let sv = kmat.clone().singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        hi > 0.0 && lo > tol * hi
    };
    let strict_complementarity = s.active_set.iter().all(|&i| s.nu[i] > tol);

    let q = p.lagrangian_hessian(&s.nu, &s.lambda);
    let z = if kmat.nrows() == 0 { DMatrix::identity(p.k, p.k) } else { linalg::null_space(&kmat, 1e-10) };
    let sosc = if z.ncols() == 0 {
        true
    } else {
        let reduced = z.transpose() * &q * &z;
        let reduced = (&reduced + reduced.transpose()) * 0.5;
        reduced.symmetric_eigenvalues().min() > tol
    };
    Regularity { licq, strict_complementarity, sosc }
}

/// Dense vector helper for tests and examples.
pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn halfspace() -> QcqpProblem {
        let mut p = QcqpProblem::new(2);
        p.p0 = SparseMat::diagonal(&[1.0, 1.0]);
        p.inequalities.push(QuadForm::linear(SparseVec::from_dense(&[-1.0, -1.0]), 2.0));
        p
    }

    pub(crate) fn circle() -> QcqpProblem {
        // min z  s.t. ½z² − ½ = 0.
        let mut p = QcqpProblem::new(1);
        p.q0 = SparseVec::from_dense(&[1.0]);
        p.equalities.push(QuadForm::new(SparseMat::diagonal(&[1.0]), SparseVec::zeros(1), -0.5));
        p
    }

    #[test]
    fn objective_examples() {
        let mut p = QcqpProblem::new(1);
        p.p0 = SparseMat::diagonal(&[2.0]);
        p.q0 = SparseVec::from_dense(&[-1.0]);
        assert_eq!(p.eval_objective(&[1.0]).unwrap(), 0.0);

        let mut p = QcqpProblem::new(2);
        p.q0 = SparseVec::from_dense(&[3.0, 4.0]);
        assert_eq!(p.eval_objective(&[1.0, 1.0]).unwrap(), 7.0);
        assert!(p.eval_objective(&[1.0]).is_err());
    }

    #[test]
    fn constraint_examples() {
        let (_, eq) = circle().eval_constraints(&[1.0]).unwrap();
        assert_eq!(eq, vec![0.0]);
        let (ineq, _) = halfspace().eval_constraints(&[1.0, 1.0]).unwrap();
        assert_eq!(ineq, vec![0.0]);
    }

    #[test]
    fn residual_of_exact_and_perturbed_points() {
        let p = halfspace();
        let s = QcqpSolution::from_point(&p, vec![1.0, 1.0], vec![1.0], vec![], SolveStatus::Optimal, 1e-7);
        assert!(kkt_residual(&p, &s) < 1e-12);
        assert_eq!(s.active_set, vec![0]);
        let s2 = QcqpSolution::from_point(&p, vec![1.1, 1.0], vec![1.0], vec![], SolveStatus::Optimal, 1e-7);
        assert!(kkt_residual(&p, &s2) >= 0.1 - 1e-12);
    }

    #[test]
    fn regularity_examples() {
        let p = halfspace();
        let s = QcqpSolution::from_point(&p, vec![1.0, 1.0], vec![1.0], vec![], SolveStatus::Optimal, 1e-7);
        assert_eq!(check_regularity(&p, &s, 1e-8), Regularity { licq: true, strict_complementarity: true, sosc: true });

        let mut dup = halfspace();
        dup.inequalities.push(dup.inequalities[0].clone());
        let s = QcqpSolution::from_point(&dup, vec![1.0, 1.0], vec![0.5, 0.5], vec![], SolveStatus::Optimal, 1e-7);
        assert!(!check_regularity(&dup, &s, 1e-8).licq);

        let c = circle();
        let s = QcqpSolution::from_point(&c, vec![-1.0], vec![], vec![1.0], SolveStatus::Optimal, 1e-7);
        assert!(kkt_residual(&c, &s) < 1e-15);
        assert!(check_regularity(&c, &s, 1e-8).all());
    }

    fn naive_quad(m: &DMatrix<f64>, v: &[f64], c: f64, z: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..z.len() {
            for j in 0..z.len() {
                s += 0.5 * m[(i, j)] * z[i] * z[j];
            }
            s += v[i] * z[i];
        }
        s + c
    }

    proptest! {
        #[test]
        fn evaluation_matches_scalar_loops(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = 5;
            let mut r = || rng.random_range(-2.0..2.0);
            let m0 = DMatrix::from_fn(k, k, |_, _| r());
            let v0: Vec<f64> = (0..k).map(|_| r()).collect();
            let m1 = DMatrix::from_fn(k, k, |_, _| r());
            let v1: Vec<f64> = (0..k).map(|_| r()).collect();
            let c1 = r();
            let z: Vec<f64> = (0..k).map(|_| r()).collect();
            let mut p = QcqpProblem::new(k);
            p.p0 = SparseMat::from_dense(&m0);
            p.q0 = SparseVec::from_dense(&v0);
            p.inequalities.push(QuadForm::from_dense(&m1, &v1, c1));
            p.equalities.push(QuadForm::from_dense(&m1, &v1, c1));
            let f = p.eval_objective(&z).unwrap();
            prop_assert!((f - naive_quad(&m0, &v0, 0.0, &z)).abs() < 1e-13);
            let (i, e) = p.eval_constraints(&z).unwrap();
            let want = naive_quad(&m1, &v1, c1, &z);
            prop_assert!((i[0] - want).abs() < 1e-13 && (e[0] - want).abs() < 1e-13);
            // Gradient against finite differences of the unsymmetrized form.
            let g = p.inequalities[0].grad(&z);
            for j in 0..k {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += 1e-6;
                zm[j] -= 1e-6;
                let fd = (naive_quad(&m1, &v1, c1, &zp) - naive_quad(&m1, &v1, c1, &zm)) / 2e-6;
                prop_assert!((fd - g[j]).abs() < 1e-6);
            }
        }
    }
}
