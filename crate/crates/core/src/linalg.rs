//! Compressed sparse row matrices and the handful of sparse-dense products
//! needed by graph convolutions.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real-valued CSR matrix. Column indices are sorted within each row and
/// unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Csr {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|(r, c, _)| *r >= n_rows || *c >= n_cols) {
            return Err(Error::Structural(format!(
                "triplet ({r}, {c}) outside a {n_rows}x{n_cols} matrix"
            )));
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("non-empty after first push") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    /// Stores every nonzero entry of a dense matrix.
    pub fn from_dense(dense: ArrayView2<'_, f64>) -> Self {
        let (n_rows, n_cols) = dense.dim();
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in dense.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    /// Range of positions of row `i` inside the flat value array.
    pub fn row_span(&self, i: usize) -> std::ops::Range<usize> {
        self.indptr[i]..self.indptr[i + 1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// True when the sparsity pattern and values are symmetric.
    pub fn is_symmetric(&self) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        (0..self.n_rows).all(|i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).all(|(&j, &v)| {
                let (tc, tv) = self.row(j);
                matches!(tc.binary_search(&i), Ok(k) if tv[k] == v)
            })
        })
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: ArrayView2<'_, f64>) -> Array2<f64> {
        self.matmul_masked(None, rhs)
    }

    /// `(self ∘ mask) · rhs`, where `mask` holds one multiplier per stored
    /// entry.
    pub fn matmul_masked(&self, mask: Option<&[f64]>, rhs: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(self.n_cols, rhs.nrows(), "sparse matmul shape mismatch");
        let width = rhs.ncols();
        let rhs = rhs.as_standard_layout();
        let src = rhs.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.n_rows * width];
        for (i, out_row) in out.chunks_exact_mut(width.max(1)).enumerate().take(self.n_rows) {
            for k in self.row_span(i) {
                let mut v = self.values[k];
                if let Some(m) = mask {
                    v *= m[k];
                    if v == 0.0 {
                        continue;
                    }
                }
                let j = self.indices[k];
                axpy(v, &src[j * width..(j + 1) * width], out_row);
            }
        }
        Array2::from_shape_vec((self.n_rows, width), out).expect("shape matches buffer")
    }

    /// `(self ∘ mask)ᵀ · rhs`.
    pub fn transpose_matmul_masked(&self, mask: Option<&[f64]>, rhs: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(self.n_rows, rhs.nrows(), "sparse transpose matmul shape mismatch");
        let width = rhs.ncols();
        let rhs = rhs.as_standard_layout();
        let src = rhs.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.n_cols * width];
        for i in 0..self.n_rows {
            let src_row = &src[i * width..(i + 1) * width];
            for k in self.row_span(i) {
                let mut v = self.values[k];
                if let Some(m) = mask {
                    v *= m[k];
                    if v == 0.0 {
                        continue;
                    }
                }
                let j = self.indices[k];
                axpy(v, src_row, &mut out[j * width..(j + 1) * width]);
            }
        }
        Array2::from_shape_vec((self.n_cols, width), out).expect("shape matches buffer")
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = Csr::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 1, 2.0), (1, 2, 0.5), (1, 0, 3.0)]).unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.to_dense(), array![[0.0, 2.0, 0.0], [3.0, 0.0, 1.5]]);
        assert_eq!(m.row(1).0, &[0, 2]);
    }

    #[test]
    fn out_of_range_triplet_is_structural_error() {
        assert!(matches!(
            Csr::from_triplets(2, 2, vec![(2, 0, 1.0)]),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn products_match_dense() {
        let d = array![[1.0, 0.0, 2.0], [0.0, 0.0, -1.0], [4.0, 5.0, 0.0]];
        let s = Csr::from_dense(d.view());
        let rhs = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(s.matmul(rhs.view()), d.dot(&rhs));
        assert_eq!(s.transpose_matmul_masked(None, rhs.view()), d.t().dot(&rhs));
        let mask = vec![0.0, 2.0, 1.0, 1.0, 0.0];
        let masked = array![[0.0, 0.0, 4.0], [0.0, 0.0, -1.0], [4.0, 0.0, 0.0]];
        assert_eq!(s.matmul_masked(Some(&mask), rhs.view()), masked.dot(&rhs));
    }

    #[test]
    fn symmetry_check() {
        let sym = Csr::from_dense(array![[0.0, 1.0], [1.0, 0.0]].view());
        let asym = Csr::from_dense(array![[0.0, 1.0], [0.0, 0.0]].view());
        assert!(sym.is_symmetric());
        assert!(!asym.is_symmetric());
    }
}
