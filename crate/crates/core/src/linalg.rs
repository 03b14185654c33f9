//! Row-major dense matrix with just the operations training needs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Returns `None` when `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == rows * cols).then_some(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`. Panics on column mismatch.
    pub fn vstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "column mismatch in vstack");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }

    /// `self * w + bias`, where `w` is a row-major `cols x out` slice.
    pub fn affine(&self, w: &[f64], bias: &[f64]) -> Matrix {
        let out = bias.len();
        debug_assert_eq!(w.len(), self.cols * out);
        let mut res = Matrix::zeros(self.rows, out);
        for i in 0..self.rows {
            let x = self.row(i);
            let dst = res.row_mut(i);
            dst.copy_from_slice(bias);
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wk = &w[k * out..(k + 1) * out];
                for (d, &wv) in dst.iter_mut().zip(wk) {
                    *d += xk * wv;
                }
            }
        }
        res
    }

    /// `self^T * other`, flattened row-major as `self.cols x other.cols`.
    pub fn transpose_mul(&self, other: &Matrix) -> Vec<f64> {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = vec![0.0; self.cols * other.cols];
        for i in 0..self.rows {
            let a = self.row(i);
            let b = other.row(i);
            for (k, &ak) in a.iter().enumerate() {
                if ak == 0.0 {
                    continue;
                }
                let dst = &mut out[k * other.cols..(k + 1) * other.cols];
                for (d, &bv) in dst.iter_mut().zip(b) {
                    *d += ak * bv;
                }
            }
        }
        out
    }

    /// `self * W^T` for a weight slice laid out `fan_in x fan_out`.
    pub fn mul_weights_transposed(&self, w: &[f64], fan_in: usize) -> Matrix {
        let fan_out = self.cols;
        debug_assert_eq!(w.len(), fan_in * fan_out);
        let mut res = Matrix::zeros(self.rows, fan_in);
        for i in 0..self.rows {
            let d = self.row(i);
            let dst = res.row_mut(i);
            for (k, slot) in dst.iter_mut().enumerate() {
                let wk = &w[k * fan_out..(k + 1) * fan_out];
                *slot = wk.iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
        res
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }
}
