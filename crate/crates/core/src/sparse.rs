//! Compressed-row sparse structures shared by the graph layer and the
//! autodiff kernels. `Csr` is structure only; `SpMat` adds edge weights.

use crate::matrix::Matrix;

/// Compressed-row adjacency structure (no weights). Column indices within
/// each row are kept sorted so iteration order is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl Csr {
    /// Build from per-row neighbor lists; each list must be sorted.
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for r in rows {
            debug_assert!(r.windows(2).all(|w| w[0] < w[1]), "rows must be sorted");
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        Csr { row_ptr, col_idx }
    }

    pub fn num_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Range of edge slots belonging to row `i`, for edge-aligned buffers.
    #[inline]
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }
}

/// Square sparse matrix in compressed-row form with per-entry weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SpMat {
    structure: Csr,
    values: Vec<f64>,
}

impl SpMat {
    pub fn new(structure: Csr, values: Vec<f64>) -> Self {
        assert_eq!(structure.nnz(), values.len());
        SpMat { structure, values }
    }

    pub fn num_rows(&self) -> usize {
        self.structure.num_rows()
    }

    pub fn structure(&self) -> &Csr {
        &self.structure
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterate (row, col, weight) in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.num_rows()).flat_map(move |i| {
            self.structure
                .row_range(i)
                .map(move |e| (i, self.structure.col_idx[e], self.values[e]))
        })
    }

    /// out = S · h
    pub fn mul_dense(&self, h: &Matrix) -> Matrix {
        debug_assert_eq!(self.num_rows(), h.rows());
        let mut out = Matrix::zeros(h.rows(), h.cols());
        for i in 0..self.num_rows() {
            for e in self.structure.row_range(i) {
                let j = self.structure.col_idx[e];
                let w = self.values[e];
                let hrow = h.row(j);
                let orow = out.row_mut(i);
                for (o, &x) in orow.iter_mut().zip(hrow) {
                    *o += w * x;
                }
            }
        }
        out
    }

    /// out = Sᵀ · g, computed by scattering rows in fixed order.
    pub fn mul_transpose_dense(&self, g: &Matrix) -> Matrix {
        debug_assert_eq!(self.num_rows(), g.rows());
        let mut out = Matrix::zeros(g.rows(), g.cols());
        for i in 0..self.num_rows() {
            let grow = g.row(i).to_vec();
            for e in self.structure.row_range(i) {
                let j = self.structure.col_idx[e];
                let w = self.values[e];
                let orow = out.row_mut(j);
                for (o, &x) in orow.iter_mut().zip(&grow) {
                    *o += w * x;
                }
            }
        }
        out
    }

    /// Dense copy, for oracles and debugging.
    pub fn to_dense(&self) -> Matrix {
        let n = self.num_rows();
        let mut out = Matrix::zeros(n, n);
        for (i, j, w) in self.iter() {
            out.set(i, j, w);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spmv_matches_dense() {
        // 0-1 edge plus self loops, arbitrary weights
        let csr = Csr::from_rows(&[vec![0, 1], vec![0, 1]]);
        let s = SpMat::new(csr, vec![0.5, 0.25, 0.75, 1.0]);
        let h = Matrix::from_rows(&[vec![2.0, 1.0], vec![4.0, -1.0]]);
        let got = s.mul_dense(&h);
        let want = s.to_dense().matmul(&h);
        assert!(got.max_abs_diff(&want) < 1e-15);

        let g = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let got_t = s.mul_transpose_dense(&g);
        let want_t = s.to_dense().transpose().matmul(&g);
        assert!(got_t.max_abs_diff(&want_t) < 1e-15);
    }
}
