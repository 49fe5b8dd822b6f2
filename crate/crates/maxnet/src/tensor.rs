//! Minimal dense two-dimensional float arrays.
//!
//! `Matrix` stores scalars in row-major order; throughout the crate rows are
//! batch examples and columns are features. Only the operations the network
//! actually needs are provided, every shape mismatch is a loud error rather
//! than an implicit broadcast, and all loops run serially in a fixed order so
//! results are bit-for-bit reproducible.

use std::fmt;

use crate::error::{Error, Result};

/// Floating point scalar usable as a matrix element. Implemented for `f32`
/// and `f64`; the choice is made once, when a matrix or network is built.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Width in bits, 32 or 64.
    const BITS: u32;
    /// Name used in configs and checkpoints ("f32" / "f64").
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Raw bit pattern widened to u64, for exactness assertions.
    fn to_bit_pattern(self) -> u64;
    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode from exactly `BITS / 8` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BITS: u32 = 32;
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_bit_pattern(self) -> u64 {
        self.to_bits() as u64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("expected 4 bytes"))
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_bit_pattern(self) -> u64 {
        self.to_bits()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("expected 8 bytes"))
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Wrap an existing row-major buffer; `data.len()` must equal
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "matrix buffer holds {} values but shape {}x{} needs {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from a rectangular list of rows. Test convenience.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::Data(format!(
                    "ragged rows: expected {} columns, found {}",
                    n_cols,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    pub fn from_fn<F: FnMut(usize, usize) -> S>(rows: usize, cols: usize, mut f: F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn fill(&mut self, v: S) {
        for x in &mut self.data {
            *x = v;
        }
    }

    /// Copy of rows `start..end` as a new matrix.
    pub fn rows_range(&self, start: usize, end: usize) -> Matrix<S> {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// `self * rhs`. The inner loop runs over `rhs` rows so access stays
    /// sequential in memory.
    pub fn matmul(&self, rhs: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != rhs.rows {
            return Err(Error::dimension("matmul", self.shape(), rhs.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(m, n);
        if m == 0 || k == 0 || n == 0 {
            return Ok(out);
        }
        for r in 0..m {
            let a_row = &self.data[r * k..(r + 1) * k];
            let out_row = &mut out.data[r * n..(r + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` without materializing the transpose. `rhs` is read
    /// row-wise, so each output element is a dot product of two rows.
    pub(crate) fn matmul_transpose_b(&self, rhs: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != rhs.cols {
            return Err(Error::dimension(
                "matmul_transpose_b",
                self.shape(),
                rhs.shape(),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.rows);
        let mut out = Matrix::zeros(m, n);
        if m == 0 || k == 0 || n == 0 {
            return Ok(out);
        }
        for r in 0..m {
            let a_row = &self.data[r * k..(r + 1) * k];
            let out_row = &mut out.data[r * n..(r + 1) * n];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc = acc + a * b;
                }
                *o = acc;
            }
        }
        Ok(out)
    }

    /// Add a length-`cols` vector to every row.
    pub fn add_row_broadcast(&self, v: &[S]) -> Result<Matrix<S>> {
        if v.len() != self.cols {
            return Err(Error::dimension(
                "add_row_broadcast",
                self.shape(),
                (1, v.len()),
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols.max(1)) {
            for (o, &b) in row.iter_mut().zip(v) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    /// Elementwise map.
    pub fn map<F: Fn(S) -> S>(&self, f: F) -> Matrix<S> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, rhs: &Matrix<S>) -> Result<Matrix<S>> {
        if self.shape() != rhs.shape() {
            return Err(Error::dimension("hadamard", self.shape(), rhs.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Sum of all elements, accumulated left to right in storage order.
    pub fn sum(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }

    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Per-column sums, each accumulated top to bottom.
    pub fn column_sums(&self) -> Vec<S> {
        let mut acc = vec![S::zero(); self.cols];
        for row in self.data.chunks_exact(self.cols.max(1)) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Raw bit patterns of every element, for bitwise equality checks.
    pub fn bit_pattern(&self) -> Vec<u64> {
        self.data.iter().map(|v| v.to_bit_pattern()).collect()
    }
}

/// `into += x^T * dz`, accumulated in place. `x` is `m x d`, `dz` is
/// `m x n`, `into` must be `d x n`. Used for weight-gradient accumulation
/// without allocating the transpose.
pub(crate) fn add_transposed_matmul<S: Scalar>(
    x: &Matrix<S>,
    dz: &Matrix<S>,
    into: &mut Matrix<S>,
) -> Result<()> {
    if x.rows != dz.rows {
        return Err(Error::dimension(
            "add_transposed_matmul",
            x.shape(),
            dz.shape(),
        ));
    }
    if into.shape() != (x.cols, dz.cols) {
        return Err(Error::dimension(
            "add_transposed_matmul (output)",
            into.shape(),
            (x.cols, dz.cols),
        ));
    }
    let (m, d, n) = (x.rows, x.cols, dz.cols);
    if m == 0 || d == 0 || n == 0 {
        return Ok(());
    }
    for r in 0..m {
        let x_row = &x.data[r * d..(r + 1) * d];
        let dz_row = &dz.data[r * n..(r + 1) * n];
        for (p, &xv) in x_row.iter().enumerate() {
            let into_row = &mut into.data[p * n..(p + 1) * n];
            for (o, &g) in into_row.iter_mut().zip(dz_row) {
                *o = *o + xv * g;
            }
        }
    }
    Ok(())
}
