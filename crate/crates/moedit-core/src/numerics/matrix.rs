use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::NumericsError;

/// Dense row-major `f64` matrix.
///
/// All products use fixed loop orders (the `k` index of every output
/// element is accumulated in ascending order), so results are
/// bit-identical run to run and match a naive triple loop exactly.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Dimension(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline(always)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline(always)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline(always)]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline(always)]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline(always)]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline(always)]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self * other`, fixed i-k-j loop order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::Dimension(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        debug_assert!(out.is_finite(), "matmul produced non-finite entries");
        Ok(out)
    }

    /// `self * other^T`. Inner reduction runs over ascending `k`.
    pub fn matmul_transpose_b(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.cols {
            return Err(NumericsError::Dimension(format!(
                "matmul_transpose_b {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        debug_assert!(
            out.is_finite(),
            "matmul_transpose_b produced non-finite entries"
        );
        Ok(out)
    }

    /// `self^T * other`. Accumulates over ascending row index.
    pub fn matmul_transpose_a(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.rows != other.rows {
            return Err(NumericsError::Dimension(format!(
                "matmul_transpose_a ({}x{})^T * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let b_row = other.row(i);
            for (k, &a) in a_row.iter().enumerate() {
                let o_row = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        debug_assert!(
            out.is_finite(),
            "matmul_transpose_a produced non-finite entries"
        );
        Ok(out)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<(), NumericsError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumericsError::Dimension(format!(
                "add_scaled {}x{} += {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        for x in &mut self.data {
            *x = v;
        }
    }

    /// FNV-1a over the IEEE bit patterns, for freeze/immutability checks.
    pub fn checksum(&self) -> u64 {
        checksum_f64s(&self.data)
    }
}

/// FNV-1a 64-bit hash over the bit patterns of a float slice.
pub fn checksum_f64s(xs: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &x in xs {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Dot product with ascending-index accumulation.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y = M * x` (column-vector convention), `M: r x c`, `x: c`, `y: r`.
pub fn matvec(m: &Matrix, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if m.cols() != x.len() {
        return Err(NumericsError::Dimension(format!(
            "matvec {}x{} * len {}",
            m.rows(),
            m.cols(),
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        out.push(dot(m.row(r), x));
    }
    Ok(out)
}

/// `y = x * M` (row-vector convention), `x: r`, `M: r x c`, `y: c`.
pub fn vecmat(x: &[f64], m: &Matrix) -> Result<Vec<f64>, NumericsError> {
    if m.rows() != x.len() {
        return Err(NumericsError::Dimension(format!(
            "vecmat len {} * {}x{}",
            x.len(),
            m.rows(),
            m.cols()
        )));
    }
    let mut out = vec![0.0; m.cols()];
    for (r, &xv) in x.iter().enumerate() {
        for (o, &mv) in out.iter_mut().zip(m.row(r)) {
            *o += xv * mv;
        }
    }
    Ok(out)
}
