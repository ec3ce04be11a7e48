//! Compressed sparse row matrices for the normalized interaction adjacencies.

use super::Tensor;

/// A CSR matrix with f64 values. Column indices within each row are sorted
/// and unique; duplicate triplets are summed at construction.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zero(rows: usize, cols: usize) -> Self {
        SparseMatrix { rows, cols, indptr: vec![0; rows + 1], indices: Vec::new(), values: Vec::new() }
    }

    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets
            .iter()
            .inspect(|(r, c, _)| {
                assert!(*r < rows && *c < cols, "triplet ({r},{c}) outside {rows}×{cols}")
            })
            .copied()
            .collect();
        sorted.sort_by_key(|&(r, c, _)| (r, c));

        let mut counts = vec![0usize; rows];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut prev: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if prev == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                counts[r] += 1;
                prev = Some((r, c));
            }
        }
        let mut indptr = vec![0usize; rows + 1];
        for r in 0..rows {
            indptr[r + 1] = indptr[r] + counts[r];
        }
        SparseMatrix { rows, cols, indptr, indices, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        match self.indices[lo..hi].binary_search(&c) {
            Ok(pos) => self.values[lo + pos],
            Err(_) => 0.0,
        }
    }

    /// Iterate the stored entries of one row as (col, value).
    pub fn row_iter(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        self.indices[lo..hi].iter().copied().zip(self.values[lo..hi].iter().copied())
    }

    /// self[rows×cols] · x[cols×w], accumulated into a fresh dense buffer.
    pub fn mul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.cols, "spmm: {}×{} · {:?}", self.rows, self.cols, x.shape());
        let w = x.cols();
        let mut out = Tensor::zeros(vec![self.rows, w]);
        let xd = x.data();
        let od = out.data_mut();
        for r in 0..self.rows {
            for (c, v) in self.row_iter(r) {
                let xrow = &xd[c * w..(c + 1) * w];
                let orow = &mut od[r * w..(r + 1) * w];
                for j in 0..w {
                    orow[j] += v * xrow[j];
                }
            }
        }
        out
    }

    /// selfᵀ[cols×rows] · x[rows×w]; used by the backward pass of spmm.
    pub fn mul_dense_transposed(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.rows, "spmmᵀ: {}×{} vs {:?}", self.rows, self.cols, x.shape());
        let w = x.cols();
        let mut out = Tensor::zeros(vec![self.cols, w]);
        let xd = x.data();
        let od = out.data_mut();
        for r in 0..self.rows {
            let xrow = &xd[r * w..(r + 1) * w];
            for (c, v) in self.row_iter(r) {
                let orow = &mut od[c * w..(c + 1) * w];
                for j in 0..w {
                    orow[j] += v * xrow[j];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![self.rows, self.cols]);
        let d = t.data_mut();
        for r in 0..self.rows {
            for (c, v) in self.row_iter(r) {
                d[r * self.cols + c] = v;
            }
        }
        t
    }

    pub fn max_abs_diff_dense(&self, dense: &Tensor) -> f64 {
        self.to_dense().max_abs_diff(dense)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for r in 0..self.rows {
            for (c, v) in self.row_iter(r) {
                if (v - self.get(c, r)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}
