//! Sparse symmetric matrices in CSR form plus the dense reduction used by
//! the direct solver. Problems here are desk-scale, so reduced systems get
//! factorized densely; the sparse side only has to assemble, combine and
//! multiply deterministically.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Shared CSR sparsity pattern (full storage, both triangles).
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Pattern {
    /// Build from undirected adjacency lists (self-loops added here).
    pub fn from_adjacency(n: usize, mut adj: Vec<Vec<usize>>) -> Pattern {
        assert_eq!(adj.len(), n);
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for (row, list) in adj.iter_mut().enumerate() {
            list.push(row);
            list.sort_unstable();
            list.dedup();
            indices.extend_from_slice(list);
            indptr.push(indices.len());
        }
        Pattern { n, indptr, indices }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    fn value_slot(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.indptr[row];
        let hi = self.indptr[row + 1];
        self.indices[lo..hi]
            .binary_search(&col)
            .ok()
            .map(|k| lo + k)
    }
}

/// Symmetric sparse matrix over a fixed pattern.
#[derive(Clone, Debug)]
pub struct SparseSym {
    pub pattern: std::sync::Arc<Pattern>,
    pub values: Vec<f64>,
}

impl SparseSym {
    pub fn zeros(pattern: std::sync::Arc<Pattern>) -> SparseSym {
        let nnz = pattern.nnz();
        SparseSym {
            pattern,
            values: vec![0.0; nnz],
        }
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn set_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Accumulate `a` at (row, col). Panics if the slot is outside the pattern.
    pub fn add(&mut self, row: usize, col: usize, a: f64) {
        let slot = self
            .pattern
            .value_slot(row, col)
            .expect("entry outside sparsity pattern");
        self.values[slot] += a;
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pattern
            .value_slot(row, col)
            .map(|s| self.values[s])
            .unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n());
        let mut y = vec![0.0; self.n()];
        for row in 0..self.n() {
            let mut acc = 0.0;
            for k in self.pattern.indptr[row]..self.pattern.indptr[row + 1] {
                acc += self.values[k] * x[self.pattern.indices[k]];
            }
            y[row] = acc;
        }
        y
    }

    /// Weighted sum of matrices sharing one pattern.
    pub fn linear_combination(weights: &[f64], mats: &[&SparseSym]) -> Result<SparseSym> {
        if weights.len() != mats.len() || mats.is_empty() {
            return Err(Error::DimensionMismatch(
                "weights and matrices must pair up".into(),
            ));
        }
        let pattern = mats[0].pattern.clone();
        for m in mats {
            if m.pattern.as_ref() != pattern.as_ref() {
                return Err(Error::DimensionMismatch(
                    "matrices do not share a sparsity pattern".into(),
                ));
            }
        }
        let mut out = SparseSym::zeros(pattern);
        for (w, m) in weights.iter().zip(mats) {
            for (o, v) in out.values.iter_mut().zip(&m.values) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Gather the square sub-matrix over `keep` (sorted dof list) densely.
    pub fn reduce_dense(&self, keep: &[usize]) -> DMatrix<f64> {
        let m = keep.len();
        let mut out = DMatrix::zeros(m, m);
        for (ri, &row) in keep.iter().enumerate() {
            for k in self.pattern.indptr[row]..self.pattern.indptr[row + 1] {
                let col = self.pattern.indices[k];
                if let Ok(ci) = keep.binary_search(&col) {
                    out[(ri, ci)] = self.values[k];
                }
            }
        }
        out
    }

    /// Columns `cols` of the rows in `keep`, used for inhomogeneous
    /// constraint elimination.
    pub fn gather_rect(&self, keep: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(keep.len(), cols.len());
        for (ri, &row) in keep.iter().enumerate() {
            for k in self.pattern.indptr[row]..self.pattern.indptr[row + 1] {
                let col = self.pattern.indices[k];
                if let Ok(ci) = cols.binary_search(&col) {
                    out[(ri, ci)] = self.values[k];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let keep: Vec<usize> = (0..self.n()).collect();
        self.reduce_dense(&keep)
    }

    /// Max |A - A^T| over the pattern; symmetric assemblies keep this at
    /// rounding level.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for row in 0..self.n() {
            for k in self.pattern.indptr[row]..self.pattern.indptr[row + 1] {
                let col = self.pattern.indices[k];
                let diff = (self.values[k] - self.get(col, row)).abs();
                worst = worst.max(diff);
            }
        }
        worst
    }
}

/// Dense SPD solve, shared by every reduced system in the kit.
pub fn solve_spd(matrix: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = nalgebra::linalg::Cholesky::new(matrix)
        .ok_or_else(|| Error::SingularSystem("Cholesky factorization failed".into()))?;
    Ok(chol.solve(rhs))
}
