//! Reverse- and forward-mode sensitivities of a solved QCQP.
//!
//! Differentiating the KKT conditions at `(z*, ν*, λ*)` gives a square system
//! `M [dz; dν; dλ] = b(dθ)` with
//!
//! ```text
//!       ┌ Q            ∇c_I            ∇c_E ┐
//!   M = │ diag(ν)∇c_Iᵀ diag(c_I(z*))   0    │
//!       └ ∇c_Eᵀ        0               0    ┘
//! ```
//!
//! where `Q` is the symmetrized Lagrangian Hessian. Backward passes solve the
//! transposed system once and contract the result with the parameters.
//!
//! Matrices in a [`QcqpProblem`] are stored unsymmetrized and only their
//! symmetric part enters the problem, so matrix gradients are returned in the
//! symmetrized form `½(z d_zᵀ + d_z zᵀ)`. That is the exact gradient with
//! respect to the stored entries.

mod check;
pub mod instances;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, LuFactor};
use crate::qcqp::{QcqpError, QcqpProblem, QcqpSolution, SolveStatus};

pub use check::{finite_diff_check, DownstreamLoss, FdEntry, FdReport, LinearLoss, QuadraticLoss};

/// `σ_min / σ_max` below which `M` is treated as singular.
pub const SINGULAR_RATIO: f64 = 1e-10;

/// A `MaxIter` solution with a residual up to this value is still differentiated.
pub const MAX_ITER_RESIDUAL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error(transparent)]
    Dimension(#[from] QcqpError),
    #[error("solution with status {status:?} and KKT residual {residual:.3e} cannot be differentiated")]
    UnusableSolution { status: SolveStatus, residual: f64 },
    #[error("KKT matrix is singular (σ_min/σ_max = {ratio:.3e}); use the backward least-norm path")]
    Singular { ratio: f64 },
    #[error("least-norm solve failed: {0}")]
    Factorization(String),
}

/// Assembled KKT matrix with its factorization.
#[derive(Debug, Clone)]
pub struct KktSystem {
    k: usize,
    m_i: usize,
    m_e: usize,
    /// Row-major `M`.
    rows: Vec<f64>,
    lu: Option<LuFactor>,
    pub singular: bool,
    pub sigma_min_ratio: f64,
}

impl KktSystem {
    pub fn dim(&self) -> usize {
        self.k + self.m_i + self.m_e
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_row_slice(n, n, &self.rows)
    }

    /// Solves `Mᵀ x = rhs`, falling back to the least-norm solution when `M`
    /// is singular. The flag reports whether the fallback was taken.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<(Vec<f64>, bool), DiffError> {
        match (&self.lu, self.singular) {
            (Some(lu), false) => Ok((lu.solve_transpose(rhs), false)),
            _ => {
                let mt = self.matrix().transpose();
                let x = linalg::least_norm_solve(&mt, rhs, SINGULAR_RATIO);
                if x.iter().all(|v| v.is_finite()) {
                    Ok((x, true))
                } else {
                    Err(DiffError::Factorization("non-finite least-norm solution".into()))
                }
            }
        }
    }

    /// Solves `M x = rhs`; errors when `M` is singular.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, DiffError> {
        match (&self.lu, self.singular) {
            (Some(lu), false) => Ok(lu.solve(rhs)),
            _ => Err(DiffError::Singular { ratio: self.sigma_min_ratio }),
        }
    }
}

fn check_solution(p: &QcqpProblem, s: &QcqpSolution) -> Result<(), DiffError> {
    p.validate()?;
    for (what, expected, got) in
        [("z", p.k, s.z.len()), ("nu", p.m_i(), s.nu.len()), ("lambda", p.m_e(), s.lambda.len())]
    {
        if expected != got {
            return Err(QcqpError::Dimension { what: what.into(), expected, got }.into());
        }
    }
    Ok(())
}

pub fn build_kkt_matrix(p: &QcqpProblem, s: &QcqpSolution) -> Result<KktSystem, DiffError> {
    check_solution(p, s)?;
    let (k, m_i, m_e) = (p.k, p.m_i(), p.m_e());
    let n = k + m_i + m_e;
    let z = &s.z;
    let mut rows = vec![0.0; n * n];

    p.p0.sym_add_to(1.0, &mut rows, n, 0);
    for (i, c) in p.inequalities.iter().enumerate() {
        let nu = s.nu[i];
        if nu != 0.0 {
            c.mat.sym_add_to(nu, &mut rows, n, 0);
        }
        let col = k + i;
        for (j, g) in c.grad_sparse(z) {
            rows[j * n + col] += g;
            rows[col * n + j] += nu * g;
        }
        rows[col * n + col] = c.value(z);
    }
    for (e, c) in p.equalities.iter().enumerate() {
        let lambda = s.lambda[e];
        if lambda != 0.0 {
            c.mat.sym_add_to(lambda, &mut rows, n, 0);
        }
        let col = k + m_i + e;
        for (j, g) in c.grad_sparse(z) {
            rows[j * n + col] += g;
            rows[col * n + j] += g;
        }
    }

    let lu = LuFactor::from_row_major(n, rows.clone()).ok();
    let sigma_min_ratio = match &lu {
        Some(lu) if n > 160 => {
            let nz: Vec<(usize, usize, f64)> = rows
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(idx, &v)| (idx / n, idx % n, v))
                .collect();
            linalg::sigma_ratio_estimate(n, &nz, lu)
        }
        Some(_) => linalg::sigma_ratio(&DMatrix::from_row_slice(n, n, &rows), None),
        None if n <= 160 => linalg::sigma_ratio(&DMatrix::from_row_slice(n, n, &rows), None),
        None => 0.0,
    };
    let singular = lu.is_none() || !(sigma_min_ratio >= SINGULAR_RATIO);
    Ok(KktSystem { k, m_i, m_e, rows, lu, singular, sigma_min_ratio })
}

/// Adjoint vectors and the primal-dual point; parameter gradients are formed
/// on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcqpGradients {
    pub z: Vec<f64>,
    pub nu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub d_z: Vec<f64>,
    pub d_nu: Vec<f64>,
    pub d_lambda: Vec<f64>,
    /// Set when `M` was singular and the least-norm solution was used.
    pub subgradient: bool,
}

/// All parameter gradients materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradients {
    pub g_p0: DMatrix<f64>,
    pub g_q0: Vec<f64>,
    pub g_p: Vec<DMatrix<f64>>,
    pub g_q: Vec<Vec<f64>>,
    pub g_r: Vec<f64>,
    pub g_d: Vec<DMatrix<f64>>,
    pub g_h: Vec<Vec<f64>>,
    pub g_g: Vec<f64>,
}

/// One scalar parameter of a [`QcqpProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Param {
    P0(usize, usize),
    Q0(usize),
    P(usize, usize, usize),
    Q(usize, usize),
    R(usize),
    D(usize, usize, usize),
    H(usize, usize),
    G(usize),
}

impl Param {
    /// Short family name: `p0`, `q0`, `p`, `q`, `r`, `d`, `h` or `g`.
    pub fn family(&self) -> &'static str {
        match self {
            Param::P0(..) => "p0",
            Param::Q0(..) => "q0",
            Param::P(..) => "p",
            Param::Q(..) => "q",
            Param::R(..) => "r",
            Param::D(..) => "d",
            Param::H(..) => "h",
            Param::G(..) => "g",
        }
    }

    /// Every scalar parameter of a problem with the shape of `p`.
    pub fn all(p: &QcqpProblem) -> Vec<Param> {
        let k = p.k;
        let mut out = Vec::new();
        let square = |f: &dyn Fn(usize, usize) -> Param, out: &mut Vec<Param>| {
            for a in 0..k {
                for b in 0..k {
                    out.push(f(a, b));
                }
            }
        };
        square(&Param::P0, &mut out);
        out.extend((0..k).map(Param::Q0));
        for i in 0..p.m_i() {
            square(&|a, b| Param::P(i, a, b), &mut out);
            out.extend((0..k).map(|a| Param::Q(i, a)));
            out.push(Param::R(i));
        }
        for j in 0..p.m_e() {
            square(&|a, b| Param::D(j, a, b), &mut out);
            out.extend((0..k).map(|a| Param::H(j, a)));
            out.push(Param::G(j));
        }
        out
    }

    /// Adds `delta` to this parameter of `p`.
    pub fn perturb(&self, p: &mut QcqpProblem, delta: f64) {
        match *self {
            Param::P0(a, b) => p.p0.add(a, b, delta),
            Param::Q0(a) => p.q0.add(a, delta),
            Param::P(i, a, b) => p.inequalities[i].mat.add(a, b, delta),
            Param::Q(i, a) => p.inequalities[i].lin.add(a, delta),
            Param::R(i) => p.inequalities[i].constant += delta,
            Param::D(j, a, b) => p.equalities[j].mat.add(a, b, delta),
            Param::H(j, a) => p.equalities[j].lin.add(a, delta),
            Param::G(j) => p.equalities[j].constant += delta,
        }
    }

    /// A problem of the same shape whose only nonzero is a unit entry here.
    pub fn unit_differential(&self, p: &QcqpProblem) -> QcqpProblem {
        let mut d = QcqpProblem::new(p.k);
        d.inequalities = p.inequalities.iter().map(|_| zero_form(p.k)).collect();
        d.equalities = p.equalities.iter().map(|_| zero_form(p.k)).collect();
        self.perturb(&mut d, 1.0);
        d
    }
}

fn zero_form(k: usize) -> crate::qcqp::QuadForm {
    crate::qcqp::QuadForm::linear(linalg::SparseVec::zeros(k), 0.0)
}

fn sym_outer(x: &[f64], y: &[f64], scale: f64) -> DMatrix<f64> {
    let k = x.len();
    DMatrix::from_fn(k, k, |a, b| 0.5 * scale * (x[a] * y[b] + y[a] * x[b]))
}

impl QcqpGradients {
    pub fn g_p0(&self) -> DMatrix<f64> {
        sym_outer(&self.z, &self.d_z, 1.0)
    }

    pub fn g_q0(&self) -> Vec<f64> {
        self.d_z.clone()
    }

    pub fn g_p(&self, i: usize) -> DMatrix<f64> {
        let (nu, dn, z) = (self.nu[i], self.d_nu[i], &self.z);
        sym_outer(z, &self.d_z, nu) + DMatrix::from_fn(z.len(), z.len(), |a, b| 0.5 * nu * dn * z[a] * z[b])
    }

    pub fn g_q(&self, i: usize) -> Vec<f64> {
        let (nu, dn) = (self.nu[i], self.d_nu[i]);
        self.d_z.iter().zip(&self.z).map(|(d, z)| nu * d + nu * dn * z).collect()
    }

    pub fn g_r(&self, i: usize) -> f64 {
        self.nu[i] * self.d_nu[i]
    }

    pub fn g_d(&self, j: usize) -> DMatrix<f64> {
        let (l, dl, z) = (self.lambda[j], self.d_lambda[j], &self.z);
        sym_outer(z, &self.d_z, l) + DMatrix::from_fn(z.len(), z.len(), |a, b| 0.5 * dl * z[a] * z[b])
    }

    pub fn g_h(&self, j: usize) -> Vec<f64> {
        let (l, dl) = (self.lambda[j], self.d_lambda[j]);
        self.d_z.iter().zip(&self.z).map(|(d, z)| l * d + dl * z).collect()
    }

    pub fn g_g(&self, j: usize) -> f64 {
        self.d_lambda[j]
    }

    /// Gradient with respect to a single scalar parameter.
    pub fn get(&self, param: Param) -> f64 {
        let z = &self.z;
        let dz = &self.d_z;
        let sym = |a: usize, b: usize| 0.5 * (z[a] * dz[b] + dz[a] * z[b]);
        match param {
            Param::P0(a, b) => sym(a, b),
            Param::Q0(a) => dz[a],
            Param::P(i, a, b) => self.nu[i] * (sym(a, b) + 0.5 * self.d_nu[i] * z[a] * z[b]),
            Param::Q(i, a) => self.nu[i] * (dz[a] + self.d_nu[i] * z[a]),
            Param::R(i) => self.g_r(i),
            Param::D(j, a, b) => self.lambda[j] * sym(a, b) + 0.5 * self.d_lambda[j] * z[a] * z[b],
            Param::H(j, a) => self.lambda[j] * dz[a] + self.d_lambda[j] * z[a],
            Param::G(j) => self.g_g(j),
        }
    }

    pub fn to_dense(&self) -> DenseGradients {
        let m_i = self.nu.len();
        let m_e = self.lambda.len();
        DenseGradients {
            g_p0: self.g_p0(),
            g_q0: self.g_q0(),
            g_p: (0..m_i).map(|i| self.g_p(i)).collect(),
            g_q: (0..m_i).map(|i| self.g_q(i)).collect(),
            g_r: (0..m_i).map(|i| self.g_r(i)).collect(),
            g_d: (0..m_e).map(|j| self.g_d(j)).collect(),
            g_h: (0..m_e).map(|j| self.g_h(j)).collect(),
            g_g: (0..m_e).map(|j| self.g_g(j)).collect(),
        }
    }
}

/// Whether a solution is good enough to differentiate: `Optimal`, or `MaxIter`
/// with a KKT residual of at most [`MAX_ITER_RESIDUAL`].
pub fn usable(s: &QcqpSolution) -> Result<(), DiffError> {
    match s.status {
        SolveStatus::Optimal => Ok(()),
        SolveStatus::MaxIter if s.kkt_residual <= MAX_ITER_RESIDUAL => {
            warn!("differentiating a MaxIter solution (KKT residual {:.2e})", s.kkt_residual);
            Ok(())
        }
        status => Err(DiffError::UnusableSolution { status, residual: s.kkt_residual }),
    }
}

/// Gradients of `ℓ(z*)` with respect to every problem parameter, given `∂ℓ/∂z*`.
pub fn backward(p: &QcqpProblem, s: &QcqpSolution, grad_z: &[f64]) -> Result<QcqpGradients, DiffError> {
    usable(s)?;
    let kkt = build_kkt_matrix(p, s)?;
    backward_with(&kkt, s, grad_z)
}

/// [`backward`] with an already assembled system.
pub fn backward_with(kkt: &KktSystem, s: &QcqpSolution, grad_z: &[f64]) -> Result<QcqpGradients, DiffError> {
    if grad_z.len() != kkt.k {
        return Err(QcqpError::Dimension { what: "grad_z".into(), expected: kkt.k, got: grad_z.len() }.into());
    }
    let mut rhs = vec![0.0; kkt.dim()];
    for (r, g) in rhs.iter_mut().zip(grad_z) {
        *r = -g;
    }
    let (d, subgradient) = if grad_z.iter().all(|&g| g == 0.0) {
        (rhs, kkt.singular)
    } else {
        kkt.solve_transpose(&rhs)?
    };
    let (k, m_i) = (kkt.k, kkt.m_i);
    Ok(QcqpGradients {
        z: s.z.clone(),
        nu: s.nu.clone(),
        lambda: s.lambda.clone(),
        d_z: d[..k].to_vec(),
        d_nu: d[k..k + m_i].to_vec(),
        d_lambda: d[k + m_i..].to_vec(),
        subgradient,
    })
}

/// Primal-dual differentials `(dz, dν, dλ)` for the parameter differentials
/// `dp`, a problem of the same shape whose entries are the perturbations.
pub fn forward_differential(
    p: &QcqpProblem,
    s: &QcqpSolution,
    dp: &QcqpProblem,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), DiffError> {
    usable(s)?;
    let kkt = build_kkt_matrix(p, s)?;
    forward_with(&kkt, s, dp)
}

pub fn forward_with(
    kkt: &KktSystem,
    s: &QcqpSolution,
    dp: &QcqpProblem,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), DiffError> {
    dp.validate()?;
    if dp.k != kkt.k || dp.m_i() != kkt.m_i || dp.m_e() != kkt.m_e {
        return Err(QcqpError::Dimension {
            what: "parameter differentials".into(),
            expected: kkt.dim(),
            got: dp.k + dp.m_i() + dp.m_e(),
        }
        .into());
    }
    let z = &s.z;
    let mut b: Vec<f64> = dp.lagrangian_grad(z, &s.nu, &s.lambda).into_iter().map(|v| -v).collect();
    for (c, nu) in dp.inequalities.iter().zip(&s.nu) {
        b.push(-nu * c.value(z));
    }
    for c in &dp.equalities {
        b.push(-c.value(z));
    }
    let x = kkt.solve(&b)?;
    let (k, m_i) = (kkt.k, kkt.m_i);
    Ok((x[..k].to_vec(), x[k..k + m_i].to_vec(), x[k + m_i..].to_vec()))
}

#[cfg(test)]
mod tests;
