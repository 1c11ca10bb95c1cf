use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Square matrix stored as sorted, duplicate-free `(row, col, value)` triplets.
///
/// The entries are kept exactly as given: no symmetrization happens on
/// insertion. Every derivative expression works with `½(P + Pᵀ)` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SparseMat {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMat {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    /// Builds from triplets; duplicates are summed.
    pub fn from_triplets<I>(dim: usize, triplets: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut entries: Vec<_> = triplets.into_iter().collect();
        for &(r, c, _) in &entries {
            assert!(r < dim && c < dim, "triplet ({r}, {c}) outside {dim}x{dim}");
        }
        entries.sort_by_key(|e| (e.0, e.1));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        Self { dim, entries: merged }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        Self::from_triplets(
            values.len(),
            values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, &v)| (i, i, v)),
        )
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "parameter matrices are square");
        let mut entries = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != 0.0 {
                    entries.push((r, c, m[(r, c)]));
                }
            }
        }
        Self { dim: m.nrows(), entries }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        match self.entries.binary_search_by(|e| (e.0, e.1).cmp(&(r, c))) {
            Ok(i) => self.entries[i].2,
            Err(_) => 0.0,
        }
    }

    /// Adds `v` to entry `(r, c)`, inserting it if structurally absent.
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        assert!(r < self.dim && c < self.dim);
        match self.entries.binary_search_by(|e| (e.0, e.1).cmp(&(r, c))) {
            Ok(i) => self.entries[i].2 += v,
            Err(i) => self.entries.insert(i, (r, c, v)),
        }
    }

    /// `zᵀ P z`.
    pub fn quad(&self, z: &[f64]) -> f64 {
        self.entries.iter().map(|&(r, c, v)| v * z[r] * z[c]).sum()
    }

    /// `zᵀ P w`.
    pub fn bilinear(&self, z: &[f64], w: &[f64]) -> f64 {
        self.entries.iter().map(|&(r, c, v)| v * z[r] * w[c]).sum()
    }

    /// Accumulates `scale · ½(P + Pᵀ) z` into `out`.
    pub fn sym_mul_acc(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        for &(r, c, v) in &self.entries {
            let h = 0.5 * scale * v;
            out[r] += h * z[c];
            out[c] += h * z[r];
        }
    }

    /// Accumulates `scale · ½(P + Pᵀ)` into a row-major dense buffer with leading dimension `ld`,
    /// placing the block at `offset`.
    pub fn sym_add_to(&self, scale: f64, buf: &mut [f64], ld: usize, offset: usize) {
        for &(r, c, v) in &self.entries {
            let h = 0.5 * scale * v;
            buf[(offset + r) * ld + offset + c] += h;
            buf[(offset + c) * ld + offset + r] += h;
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|&(r, c, v)| (r, c, v * s)).collect(),
        }
    }

    /// Re-embeds the matrix in a larger space, leaving indices unchanged.
    pub fn widened(&self, dim: usize) -> Self {
        assert!(dim >= self.dim);
        Self { dim, entries: self.entries.clone() }
    }
}

/// Vector stored as sorted, duplicate-free `(index, value)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SparseVec {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseVec {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    pub fn from_pairs<I>(dim: usize, pairs: I) -> Self
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        let mut entries: Vec<_> = pairs.into_iter().collect();
        for &(i, _) in &entries {
            assert!(i < dim, "index {i} outside dimension {dim}");
        }
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (i, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        Self { dim, entries: merged }
    }

    pub fn from_dense(v: &[f64]) -> Self {
        Self {
            dim: v.len(),
            entries: v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, &x)| (i, x)).collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] += v;
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> f64 {
        match self.entries.binary_search_by_key(&i, |e| e.0) {
            Ok(k) => self.entries[k].1,
            Err(_) => 0.0,
        }
    }

    pub fn add(&mut self, i: usize, v: f64) {
        assert!(i < self.dim);
        match self.entries.binary_search_by_key(&i, |e| e.0) {
            Ok(k) => self.entries[k].1 += v,
            Err(k) => self.entries.insert(k, (i, v)),
        }
    }

    pub fn dot(&self, z: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * z[i]).sum()
    }

    pub fn axpy_into(&self, scale: f64, out: &mut [f64]) {
        for &(i, v) in &self.entries {
            out[i] += scale * v;
        }
    }

    pub fn widened(&self, dim: usize) -> Self {
        assert!(dim >= self.dim);
        Self { dim, entries: self.entries.clone() }
    }
}
