//! Coordinate-format sparse matrices.
//!
//! Entries are kept sorted by `(row, col)` with duplicates summed and explicit
//! zeros dropped, so the triplet list doubles as a CSR layout via `row_ptr`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_idx: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    row_ptr: Vec<usize>,
}

impl SparseMatrix {
    /// Builds a matrix from triplets. Duplicate coordinates are summed and
    /// resulting zeros removed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut trip: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, v) in &trip {
            if r >= rows || c >= cols {
                return Err(Error::contract(format!(
                    "entry ({r}, {c}) outside {rows}x{cols} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::contract(format!("non-finite entry at ({r}, {c})")));
            }
        }
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_idx = Vec::with_capacity(trip.len());
        let mut col_idx = Vec::with_capacity(trip.len());
        let mut values: Vec<f64> = Vec::with_capacity(trip.len());
        for (r, c, v) in trip {
            if let (Some(&lr), Some(&lc)) = (row_idx.last(), col_idx.last()) {
                if lr == r && lc == c {
                    *values.last_mut().unwrap() += v;
                    continue;
                }
            }
            row_idx.push(r);
            col_idx.push(c);
            values.push(v);
        }
        let mut m = SparseMatrix {
            rows,
            cols,
            row_idx,
            col_idx,
            values,
            row_ptr: Vec::new(),
        };
        m.drop_zeros();
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0))).expect("identity is valid")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_triplets(rows, cols, std::iter::empty()).expect("empty is valid")
    }

    fn drop_zeros(&mut self) {
        let keep: Vec<bool> = self.values.iter().map(|v| *v != 0.0).collect();
        let mut k = 0;
        for i in 0..self.values.len() {
            if keep[i] {
                self.row_idx[k] = self.row_idx[i];
                self.col_idx[k] = self.col_idx[i];
                self.values[k] = self.values[i];
                k += 1;
            }
        }
        self.row_idx.truncate(k);
        self.col_idx.truncate(k);
        self.values.truncate(k);
        self.rebuild_row_ptr();
    }

    fn rebuild_row_ptr(&mut self) {
        let mut ptr = vec![0usize; self.rows + 1];
        for &r in &self.row_idx {
            ptr[r + 1] += 1;
        }
        for i in 0..self.rows {
            ptr[i + 1] += ptr[i];
        }
        self.row_ptr = ptr;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.row_idx
            .iter()
            .zip(&self.col_idx)
            .zip(&self.values)
            .map(|((&r, &c), &v)| (r, c, v))
    }

    /// Entries of one row as `(col, value)` pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[a..b].iter().zip(&self.values[a..b]).map(|(&c, &v)| (c, v))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        match self.col_idx[a..b].binary_search(&c) {
            Ok(k) => self.values[a + k],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        SparseMatrix::from_triplets(self.cols, self.rows, self.entries().map(|(r, c, v)| (c, r, v)))
            .expect("transpose of a valid matrix is valid")
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols && self.entries().all(|(r, c, v)| (self.get(c, r) - v).abs() <= tol)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    /// `out = self * x` for a row-major `x` with `width` columns.
    pub fn mul_dense_into(&self, x: &[f64], width: usize, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols * width);
        debug_assert_eq!(out.len(), self.rows * width);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, dst) in out.chunks_exact_mut(width.max(1)).take(self.rows).enumerate() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            for (&c, &v) in self.col_idx[span.clone()].iter().zip(&self.values[span]) {
                let src = &x[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }

    /// `out += selfᵀ * g` for a row-major `g` with `width` columns.
    pub fn mul_transpose_dense_acc(&self, g: &[f64], width: usize, out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows * width);
        debug_assert_eq!(out.len(), self.cols * width);
        for (r, c, v) in self.entries() {
            let src = &g[r * width..(r + 1) * width];
            let dst = &mut out[c * width..(c + 1) * width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += v * s;
            }
        }
    }

    pub fn mul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * width];
        self.mul_dense_into(x, width, &mut out);
        out
    }

    /// Sparse-sparse product, used for invariant checks such as `Q_d Q_u = I`.
    pub fn matmul(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.cols != other.rows {
            return Err(Error::contract(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut trip = Vec::new();
        for r in 0..self.rows {
            let mut acc: std::collections::BTreeMap<usize, f64> = Default::default();
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    *acc.entry(c).or_insert(0.0) += a * b;
                }
            }
            trip.extend(acc.into_iter().map(|(c, v)| (r, c, v)));
        }
        SparseMatrix::from_triplets(self.rows, other.cols, trip)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, c, v) in self.entries() {
            d[r][c] = v;
        }
        d
    }
}
