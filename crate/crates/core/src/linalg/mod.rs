//! Linear algebra kernels: sparse parameter storage, a zero-skipping dense LU,
//! a symmetric indefinite LDLᵀ with inertia, and SVD-based least-norm solves.

mod ldl;
mod lu;
mod sparse;

pub use ldl::{Inertia, LdlFactor};
pub use lu::{sigma_ratio, sigma_ratio_estimate, LuFactor, SingularMatrix};
pub use sparse::{SparseMat, SparseVec};

use nalgebra::{DMatrix, DVector};

/// Minimum-norm least-squares solution of `A x = b` via SVD. Singular values
/// below `rel_tol · σ_max` are dropped.
pub fn least_norm_solve(a: &DMatrix<f64>, b: &[f64], rel_tol: f64) -> Vec<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (rel_tol * smax).max(f64::MIN_POSITIVE);
    let x = svd
        .solve(&DVector::from_column_slice(b), eps)
        .expect("both singular vector sets were requested");
    x.iter().copied().collect()
}

/// Orthonormal basis of the null space of `a`, one column per dropped singular value.
pub fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    // Pad to square so the SVD exposes all right singular vectors.
    let mut sq = DMatrix::zeros(n.max(a.nrows()), n);
    sq.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = sq.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let smax = svd.singular_values.max();
    let cols: Vec<_> = (0..n)
        .filter(|&i| svd.singular_values[i] <= rel_tol * smax.max(f64::MIN_POSITIVE))
        .map(|i| v_t.row(i).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
