/// Symmetric indefinite factorization `P A Pᵀ = L D Lᵀ` with Bunch–Kaufman
/// pivoting. `D` has 1×1 and 2×2 blocks; the inertia falls out of the blocks.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    /// Row-major; strictly lower part holds `L`.
    a: Vec<f64>,
    perm: Vec<usize>,
    blocks: Vec<Block>,
    inertia: Inertia,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Debug, Clone, Copy)]
enum Block {
    One { k: usize, d: f64 },
    Two { k: usize, d: [f64; 3] },
}

const ALPHA: f64 = 0.640_388_203_202_208; // (1 + √17) / 8

impl LdlFactor {
    /// Factors the symmetric matrix given in full row-major storage.
    pub fn new(n: usize, mut a: Vec<f64>) -> Self {
        assert_eq!(a.len(), n * n);
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let zero_tol = scale * f64::EPSILON * 16.0;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut blocks = Vec::new();
        let mut inertia = Inertia::default();
        let mut nz: Vec<usize> = Vec::with_capacity(n);
        let mut k = 0;

        while k < n {
            let akk = a[k * n + k].abs();
            let (mut lambda, mut r) = (0.0, k);
            for i in k + 1..n {
                let v = a[i * n + k].abs();
                if v > lambda {
                    lambda = v;
                    r = i;
                }
            }
            if lambda == 0.0 && akk <= zero_tol {
                a[k * n + k] = 0.0;
                inertia.zero += 1;
                blocks.push(Block::One { k, d: 0.0 });
                k += 1;
                continue;
            }

            let two = if akk >= ALPHA * lambda {
                false
            } else {
                let mut sigma = 0.0f64;
                for j in k..n {
                    if j != r {
                        sigma = sigma.max(a[r * n + j].abs());
                    }
                }
                if akk * sigma >= ALPHA * lambda * lambda {
                    false
                } else if a[r * n + r].abs() >= ALPHA * sigma {
                    sym_swap(&mut a, n, k, r, &mut perm);
                    false
                } else {
                    sym_swap(&mut a, n, k + 1, r, &mut perm);
                    true
                }
            };

            if !two {
                let d = a[k * n + k];
                if d.abs() <= zero_tol {
                    inertia.zero += 1;
                } else if d > 0.0 {
                    inertia.positive += 1;
                } else {
                    inertia.negative += 1;
                }
                nz.clear();
                for i in k + 1..n {
                    if a[i * n + k] != 0.0 {
                        nz.push(i);
                    }
                }
                for &i in &nz {
                    let aik = a[i * n + k];
                    let f = aik / d;
                    for &j in &nz {
                        a[i * n + j] -= f * a[j * n + k];
                    }
                }
                for &i in &nz {
                    a[i * n + k] /= d;
                }
                blocks.push(Block::One { k, d });
                k += 1;
            } else {
                let d11 = a[k * n + k];
                let d21 = a[(k + 1) * n + k];
                let d22 = a[(k + 1) * n + k + 1];
                let det = d11 * d22 - d21 * d21;
                for ev in eig2(d11, d21, d22) {
                    if ev.abs() <= zero_tol {
                        inertia.zero += 1;
                    } else if ev > 0.0 {
                        inertia.positive += 1;
                    } else {
                        inertia.negative += 1;
                    }
                }
                // Inverse of the 2×2 block.
                let (i11, i21, i22) = (d22 / det, -d21 / det, d11 / det);
                nz.clear();
                for i in k + 2..n {
                    if a[i * n + k] != 0.0 || a[i * n + k + 1] != 0.0 {
                        nz.push(i);
                    }
                }
                let mut w = Vec::with_capacity(nz.len());
                for &i in &nz {
                    let (x, y) = (a[i * n + k], a[i * n + k + 1]);
                    w.push((x * i11 + y * i21, x * i21 + y * i22));
                }
                for (p, &i) in nz.iter().enumerate() {
                    let (l1, l2) = w[p];
                    for &j in &nz {
                        a[i * n + j] -= l1 * a[j * n + k] + l2 * a[j * n + k + 1];
                    }
                }
                for (p, &i) in nz.iter().enumerate() {
                    a[i * n + k] = w[p].0;
                    a[i * n + k + 1] = w[p].1;
                }
                a[(k + 1) * n + k] = 0.0;
                blocks.push(Block::Two { k, d: [d11, d21, d22] });
                k += 2;
            }
        }
        Self { n, a, perm, blocks, inertia }
    }

    pub fn inertia(&self) -> Inertia {
        self.inertia
    }

    /// Solves `A x = b`. Zero pivots are treated as pseudo-inverse entries.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.a[i * n..i * n + i];
            let mut s = x[i];
            for (j, &l) in row.iter().enumerate() {
                if l != 0.0 {
                    s -= l * x[j];
                }
            }
            x[i] = s;
        }
        for blk in &self.blocks {
            match *blk {
                Block::One { k, d } => {
                    x[k] = if d == 0.0 { 0.0 } else { x[k] / d };
                }
                Block::Two { k, d } => {
                    let det = d[0] * d[2] - d[1] * d[1];
                    let (u, v) = (x[k], x[k + 1]);
                    x[k] = (d[2] * u - d[1] * v) / det;
                    x[k + 1] = (d[0] * v - d[1] * u) / det;
                }
            }
        }
        for i in (0..n).rev() {
            let xi = x[i];
            if xi != 0.0 {
                let row = &self.a[i * n..i * n + i];
                for (j, &l) in row.iter().enumerate() {
                    if l != 0.0 {
                        x[j] -= l * xi;
                    }
                }
            }
        }
        let mut out = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            out[p] = x[i];
        }
        out
    }
}

fn eig2(a: f64, b: f64, c: f64) -> [f64; 2] {
    let m = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    [m + r, m - r]
}

/// Swaps rows and columns `i < j` (with `i` at the current elimination step).
fn sym_swap(a: &mut [f64], n: usize, i: usize, j: usize, perm: &mut [usize]) {
    if i == j {
        return;
    }
    for c in 0..n {
        a.swap(i * n + c, j * n + c);
    }
    for r in 0..n {
        a.swap(r * n + i, r * n + j);
    }
    perm.swap(i, j);
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn dense(n: usize, m: &DMatrix<f64>) -> Vec<f64> {
        let mut v = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                v[r * n + c] = m[(r, c)];
            }
        }
        v
    }

    #[test]
    fn saddle_point_inertia() {
        // [[2, 0, 1], [0, 3, 1], [1, 1, 0]] has two positive and one negative eigenvalue.
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 1.0, 0.0, 3.0, 1.0, 1.0, 1.0, 0.0]);
        let f = LdlFactor::new(3, dense(3, &m));
        assert_eq!(f.inertia(), Inertia { positive: 2, negative: 1, zero: 0 });
        let x = f.solve(&[1.0, 2.0, 3.0]);
        let r = &m * nalgebra::DVector::from_vec(x) - nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn zero_diagonal_forces_two_by_two() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let f = LdlFactor::new(2, dense(2, &m));
        assert_eq!(f.inertia(), Inertia { positive: 1, negative: 1, zero: 0 });
        assert_eq!(f.solve(&[2.0, 3.0]), vec![3.0, 2.0]);
    }

    proptest! {
        #[test]
        fn inertia_matches_eigenvalues(seed in 0u64..300, n in 1usize..10) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v: f64 = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(-2.0..2.0) };
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            let eig = m.clone().symmetric_eigenvalues();
            prop_assume!(eig.iter().all(|e| e.abs() > 1e-6));
            let f = LdlFactor::new(n, dense(n, &m));
            let pos = eig.iter().filter(|e| **e > 0.0).count();
            prop_assert_eq!(f.inertia(), Inertia { positive: pos, negative: n - pos, zero: 0 });
            let b: Vec<f64> = (0..n).map(|i| i as f64 - 1.5).collect();
            let x = f.solve(&b);
            let r = &m * nalgebra::DVector::from_vec(x) - nalgebra::DVector::from_vec(b);
            let cond = eig.iter().fold(0.0f64, |a, e| a.max(e.abs())) / eig.iter().fold(f64::INFINITY, |a, e| a.min(e.abs()));
            prop_assert!(r.amax() < 1e-12 * cond.max(1.0) * 10.0);
        }
    }
}
