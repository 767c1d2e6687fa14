//! Sparse matrix storage: a 0/1 routing matrix with fast row and column
//! access, and a symmetric CSR matrix used by the linear solvers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("entry ({0}, {1}) out of range for {2}x{3} matrix")]
    OutOfRange(usize, usize, usize, usize),
    #[error("duplicate entry at ({0}, {1})")]
    Duplicate(usize, usize),
    #[error("matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
}

/// m x n 0/1 link-route matrix. Row i lists the flows crossing link i,
/// column j lists the links on flow j's route.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix {
    m: usize,
    n: usize,
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
}

impl RoutingMatrix {
    /// Build from (link, flow) index pairs. Rejects duplicates and
    /// out-of-range indices. Row and column lists come out sorted.
    pub fn from_pairs(
        m: usize,
        n: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, SparseError> {
        let mut rows = vec![Vec::new(); m];
        let mut cols = vec![Vec::new(); n];
        for (i, j) in pairs {
            if i >= m || j >= n {
                return Err(SparseError::OutOfRange(i, j, m, n));
            }
            rows[i].push(j);
            cols[j].push(i);
        }
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            if row.windows(2).any(|w| w[0] == w[1]) {
                let j = row.windows(2).find(|w| w[0] == w[1]).unwrap()[0];
                return Err(SparseError::Duplicate(i, j));
            }
        }
        for col in cols.iter_mut() {
            col.sort_unstable();
        }
        Ok(Self { m, n, rows, cols })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Flows crossing link i.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    /// Links on flow j's route.
    pub fn col(&self, j: usize) -> &[usize] {
        &self.cols[j]
    }

    /// All nonzero (link, flow) pairs in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
    }

    /// Link loads R f.
    pub fn mul(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.n);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&j| f[j]).sum())
            .collect()
    }

    /// Per-flow route sums R^T y.
    pub fn mul_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.m);
        self.cols
            .iter()
            .map(|col| col.iter().map(|&i| y[i]).sum())
            .collect()
    }
}

/// Symmetric sparse matrix in CSR form. Both triangles are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSym {
    /// Build from triplets; duplicates within a row are rejected, and the
    /// pattern and values must be exactly symmetric.
    pub fn from_triplets(
        dim: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, SparseError> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
        for &(i, j, v) in triplets {
            if i >= dim || j >= dim {
                return Err(SparseError::OutOfRange(i, j, dim, dim));
            }
            per_row[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut vals = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        for (i, row) in per_row.iter_mut().enumerate() {
            row.sort_unstable_by_key(|&(j, _)| j);
            if let Some(w) = row.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(SparseError::Duplicate(i, w[0].0));
            }
            for &(j, v) in row.iter() {
                col_idx.push(j);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        let mat = Self {
            dim,
            row_ptr,
            col_idx,
            vals,
        };
        mat.check_symmetric()?;
        Ok(mat)
    }

    fn check_symmetric(&self) -> Result<(), SparseError> {
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                if j > i {
                    match self.get(j, i) {
                        Some(w) if w == v => {}
                        _ => return Err(SparseError::NotSymmetric(i, j)),
                    }
                }
            }
        }
        // Mirror check: every (j, i) with j > i must have a partner too.
        for j in 0..self.dim {
            for (i, _) in self.row(j) {
                if i < j && self.get(i, j).is_none() {
                    return Err(SparseError::NotSymmetric(j, i));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Nonzero (column, value) pairs of row i, sorted by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.vals[lo..hi])
            .map(|(&j, &v)| (j, v))
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .binary_search(&j)
            .ok()
            .map(|k| self.vals[lo + k])
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i).unwrap_or(0.0)).collect()
    }

    /// y = A x with a fixed row-major accumulation order.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        (0..self.dim)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// Dense copy, for small oracle comparisons.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.dim]; self.dim];
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                a[i][j] = v;
            }
        }
        a
    }
}

/// ||x||_2
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// x . y
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_row_col_access() {
        let r = RoutingMatrix::from_pairs(3, 2, [(0, 0), (1, 0), (1, 1), (2, 1)]).unwrap();
        assert_eq!(r.row(1), &[0, 1]);
        assert_eq!(r.col(0), &[0, 1]);
        assert_eq!(r.nnz(), 4);
        assert_eq!(r.mul(&[1.0, 2.0]), vec![1.0, 3.0, 2.0]);
        assert_eq!(r.mul_t(&[1.0, 1.0, 1.0]), vec![2.0, 2.0]);
    }

    #[test]
    fn routing_rejects_duplicates_and_range() {
        assert!(matches!(
            RoutingMatrix::from_pairs(2, 2, [(0, 0), (0, 0)]),
            Err(SparseError::Duplicate(0, 0))
        ));
        assert!(matches!(
            RoutingMatrix::from_pairs(2, 2, [(2, 0)]),
            Err(SparseError::OutOfRange(2, 0, 2, 2))
        ));
    }

    #[test]
    fn sym_from_triplets() {
        let a = SparseSym::from_triplets(
            2,
            &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)],
        )
        .unwrap();
        assert_eq!(a.get(0, 1), Some(1.0));
        assert_eq!(a.mul(&[1.0, 1.0]), vec![3.0, 3.0]);
        assert_eq!(a.diag(), vec![2.0, 2.0]);
    }

    #[test]
    fn sym_rejects_asymmetry() {
        let r = SparseSym::from_triplets(2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)]);
        assert!(matches!(r, Err(SparseError::NotSymmetric(0, 1))));
        let r = SparseSym::from_triplets(
            2,
            &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 2.0), (1, 1, 1.0)],
        );
        assert!(matches!(r, Err(SparseError::NotSymmetric(0, 1))));
    }
}
