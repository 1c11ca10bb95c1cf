use nalgebra::DMatrix;

/// Relative pivot threshold: the diagonal is kept as pivot when it is within this
/// factor of the column maximum, which limits fill on structured KKT matrices.
const PIVOT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("matrix is numerically singular at elimination step {step}")]
pub struct SingularMatrix {
    pub step: usize,
}

/// Row-major dense LU factorization `P A = L U` that skips structural zeros
/// during elimination. Supports solves with `A` and with `Aᵀ`.
#[derive(Debug, Clone)]
pub struct LuFactor {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactor {
    pub fn new(a: &DMatrix<f64>) -> Result<Self, SingularMatrix> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU requires a square matrix");
        let mut lu = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                lu[r * n + c] = a[(r, c)];
            }
        }
        Self::from_row_major(n, lu)
    }

    /// Factors a row-major buffer in place.
    pub fn from_row_major(n: usize, mut lu: Vec<f64>) -> Result<Self, SingularMatrix> {
        assert_eq!(lu.len(), n * n);
        let scale = lu.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let tiny = scale * f64::EPSILON * n.max(1) as f64 * 1e-3;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut cols: Vec<usize> = Vec::with_capacity(n);
        let mut pivot_row = vec![0.0; n];

        for k in 0..n {
            let mut best = k;
            let mut best_abs = 0.0;
            for i in k..n {
                let v = lu[i * n + k].abs();
                if v > best_abs {
                    best_abs = v;
                    best = i;
                }
            }
            if best_abs <= tiny || !best_abs.is_finite() {
                return Err(SingularMatrix { step: k });
            }
            if lu[k * n + k].abs() >= PIVOT_THRESHOLD * best_abs {
                best = k;
            }
            if best != k {
                for c in 0..n {
                    lu.swap(k * n + c, best * n + c);
                }
                perm.swap(k, best);
            }

            let pivot = lu[k * n + k];
            cols.clear();
            for c in k + 1..n {
                let v = lu[k * n + c];
                if v != 0.0 {
                    cols.push(c);
                    pivot_row[c] = v;
                }
            }
            for i in k + 1..n {
                let lik = lu[i * n + k];
                if lik == 0.0 {
                    continue;
                }
                let l = lik / pivot;
                lu[i * n + k] = l;
                let row = &mut lu[i * n..(i + 1) * n];
                for &c in &cols {
                    row[c] -= l * pivot_row[c];
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let mut s = x[i];
            for (j, &l) in row.iter().enumerate() {
                if l != 0.0 {
                    s -= l * x[j];
                }
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n..(i + 1) * n];
            let mut s = x[i];
            for j in i + 1..n {
                let u = row[j];
                if u != 0.0 {
                    s -= u * x[j];
                }
            }
            x[i] = s / row[i];
        }
        x
    }

    /// Solves `Aᵀ x = b` with the same factors.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        // Uᵀ w = b, column-oriented over the rows of U.
        let mut w = b.to_vec();
        for i in 0..n {
            let row = &self.lu[i * n..(i + 1) * n];
            w[i] /= row[i];
            let wi = w[i];
            if wi != 0.0 {
                for j in i + 1..n {
                    let u = row[j];
                    if u != 0.0 {
                        w[j] -= u * wi;
                    }
                }
            }
        }
        // Lᵀ v = w.
        for i in (0..n).rev() {
            let vi = w[i];
            if vi != 0.0 {
                let row = &self.lu[i * n..i * n + i];
                for (j, &l) in row.iter().enumerate() {
                    if l != 0.0 {
                        w[j] -= l * vi;
                    }
                }
            }
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = w[i];
        }
        x
    }

    /// Smallest and largest absolute pivot of `U`.
    pub fn pivot_range(&self) -> (f64, f64) {
        let n = self.n;
        (0..n).map(|i| self.lu[i * n + i].abs()).fold((f64::INFINITY, 0.0), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}

/// Estimate of `σ_min / σ_max` for `a`.
///
/// Small matrices use an exact SVD. Larger ones combine power iteration on
/// `AᵀA` with inverse iteration through the LU factors, which is accurate
/// enough to decide singularity against a threshold many orders of magnitude
/// below one.
pub fn sigma_ratio(a: &DMatrix<f64>, lu: Option<&LuFactor>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 1.0;
    }
    match lu {
        Some(lu) if n > 160 => {
            let mut nz = Vec::new();
            for c in 0..n {
                for r in 0..n {
                    if a[(r, c)] != 0.0 {
                        nz.push((r, c, a[(r, c)]));
                    }
                }
            }
            sigma_ratio_estimate(n, &nz, lu)
        }
        _ => {
            let sv = a.clone().singular_values();
            let max = sv.max();
            if max == 0.0 {
                0.0
            } else {
                sv.min() / max
            }
        }
    }
}

/// Iterative `σ_min / σ_max` estimate from the nonzeros of `A` and its LU factors.
pub fn sigma_ratio_estimate(n: usize, nz: &[(usize, usize, f64)], lu: &LuFactor) -> f64 {
    let matvec = |x: &[f64], y: &mut [f64]| {
        y.iter_mut().for_each(|v| *v = 0.0);
        for &(r, c, v) in nz {
            y[r] += v * x[c];
        }
    };
    let matvec_t = |x: &[f64], y: &mut [f64]| {
        y.iter_mut().for_each(|v| *v = 0.0);
        for &(r, c, v) in nz {
            y[c] += v * x[r];
        }
    };
    let normalize = |v: &mut [f64]| -> f64 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        norm
    };
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 * 0.01).collect();
    normalize(&mut x);
    let mut tmp = vec![0.0; n];
    let mut smax = 0.0;
    for _ in 0..20 {
        matvec(&x, &mut tmp);
        matvec_t(&tmp, &mut x);
        let norm = normalize(&mut x);
        if norm == 0.0 {
            return 0.0;
        }
        smax = norm.sqrt();
    }
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 - ((i * 104729) % 17) as f64 * 0.02).collect();
    normalize(&mut x);
    let mut inv = 0.0;
    for _ in 0..20 {
        let mut y = lu.solve(&lu.solve_transpose(&x));
        let norm = normalize(&mut y);
        if !norm.is_finite() {
            return 0.0;
        }
        inv = norm;
        x = y;
    }
    // inv approximates 1 / σ_min².
    (1.0 / inv.sqrt()) / smax
}
