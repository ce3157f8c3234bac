//! Compressed sparse row matrices for graph operators.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Square CSR matrix. Rows hold strictly increasing column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists; each list must be sorted
    /// by column with no duplicates.
    pub fn from_rows(n: usize, rows: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::internal(format!(
                "expected {n} rows, got {}",
                rows.len()
            )));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for (i, row) in rows.iter().enumerate() {
            let mut last: Option<u32> = None;
            for &(c, v) in row {
                if c as usize >= n {
                    return Err(Error::internal(format!(
                        "row {i}: column {c} out of bounds for n={n}"
                    )));
                }
                if let Some(p) = last {
                    if c <= p {
                        return Err(Error::internal(format!(
                            "row {i}: columns not strictly increasing at {c}"
                        )));
                    }
                }
                last = Some(c);
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn matvec(&self, x: &Array1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.n, "matvec dimension mismatch");
        let mut out = Array1::<f64>::zeros(self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for (j, v) in self.row(i) {
                acc += v * x[j];
            }
            out[i] = acc;
        }
        out
    }

    /// Dense product `self * x` where `x` is `n x f`.
    pub fn matmat(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n, "matmat dimension mismatch");
        let f = x.ncols();
        let mut out = Array2::<f64>::zeros((self.n, f));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                let src = x.row(j);
                let mut dst = out.row_mut(i);
                for c in 0..f {
                    dst[c] += v * src[c];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`; zero for symmetric input.
    pub fn max_asymmetry(&self) -> f64 {
        let dense_cols: std::collections::HashMap<(usize, usize), f64> = (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, v)| ((i, j), v)))
            .collect();
        let mut worst = 0.0f64;
        for (&(i, j), &v) in &dense_cols {
            let t = dense_cols.get(&(j, i)).copied().unwrap_or(0.0);
            worst = worst.max((v - t).abs());
        }
        worst
    }
}
