//! Dense row-major f64 matrices and the kernels the encoder is built from.
//!
//! Everything here is a pure function over immutable inputs; recording onto
//! a differentiation tape happens one level up in [`crate::tape`]. Summation
//! order is fixed (ascending inner index, row-major traversal) so that
//! results are reproducible bit-for-bit and can be compared against naive
//! triple-loop references exactly.

use crate::{Error, Result};

/// Tanh-approximation constant for GELU: `0.5x(1+tanh(sqrt(2/pi)(x + 0.044715 x^3)))`.
pub const GELU_CUBIC: f64 = 0.044715;

/// Default layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Additive attention-mask value for padded key positions. Large enough to
/// underflow to exactly 0.0 after the max-subtracted softmax.
pub const MASK_NEG: f64 = -1e9;

/// Numeric width used when evaluating a forward pass.
///
/// Training and gradient checks always run in `F64`. `F32` emulates
/// single-precision inference by rounding every kernel output through f32
/// (accumulation itself stays in f64).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }
}

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Matrix from a row-major buffer. Errors if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot fill a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Single-row matrix from a slice.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// True when every entry is finite (no NaN/Inf).
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry difference against another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Round every entry through the given precision.
    pub fn rounded(mut self, precision: Precision) -> Self {
        if precision == Precision::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self
    }
}

fn check_cols_match(what: &str, len: usize, m: &Matrix) -> Result<()> {
    if len != m.cols {
        return Err(Error::Shape(format!(
            "{what} of length {len} does not match matrix with {} columns ({}x{})",
            m.cols, m.rows, m.cols
        )));
    }
    Ok(())
}

/// Matrix product `a * b`.
///
/// Accumulation runs over ascending `k` for each output entry, identical to
/// the textbook triple loop, so results are bit-for-bit reproducible.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: lhs {}x{} incompatible with rhs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j loop order: the inner j loop walks contiguous rows of b and out,
    // while each out[i][j] still accumulates over ascending k.
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Matrix product `a * b^T` without materializing the transpose.
pub fn matmul_transpose_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_transpose_b: lhs {}x{} incompatible with rhs^T {}x{}",
            a.rows, a.cols, b.cols, b.rows
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    }
    Ok(out)
}

/// Matrix product `a^T * b` without materializing the transpose.
pub fn matmul_transpose_a(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_transpose_a: lhs^T {}x{} incompatible with rhs {}x{}",
            a.cols, a.rows, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let out_row = out.row_mut(k);
            for (o, &bij) in out_row.iter_mut().zip(b_row) {
                *o += aik * bij;
            }
        }
    }
    Ok(out)
}

pub fn transpose(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.cols, m.rows);
    for r in 0..m.rows {
        for c in 0..m.cols {
            out.data[c * m.rows + r] = m.data[r * m.cols + c];
        }
    }
    out
}

/// Elementwise sum; shapes must match.
pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(&b.data) {
        *o += v;
    }
    Ok(out)
}

/// Elementwise difference; shapes must match.
pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "sub: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(&b.data) {
        *o -= v;
    }
    Ok(out)
}

/// Elementwise (Hadamard) product; shapes must match.
pub fn mul_elementwise(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mul_elementwise: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(&b.data) {
        *o *= v;
    }
    Ok(out)
}

pub fn scale(m: &Matrix, c: f64) -> Matrix {
    let mut out = m.clone();
    for v in &mut out.data {
        *v *= c;
    }
    out
}

/// Adds a 1-row bias to every row of `m`.
pub fn add_row_broadcast(m: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows != 1 {
        return Err(Error::Shape(format!(
            "add_row_broadcast: bias must be 1x{}, got {}x{}",
            m.cols, bias.rows, bias.cols
        )));
    }
    check_cols_match("bias", bias.cols, m)?;
    let mut out = m.clone();
    for r in 0..out.rows {
        for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction. Each output row sums to 1.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-row layer normalization followed by the affine `gain * x + bias`.
///
/// Variance is the population variance over the row; a constant row maps to
/// all zeros through the epsilon.
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    check_cols_match("gain", gain.len(), x)?;
    check_cols_match("bias", bias.len(), x)?;
    let n = x.cols as f64;
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Elementwise GELU (tanh approximation).
pub fn gelu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in &mut out.data {
        *v = gelu_scalar(*v);
    }
    out
}

/// Elementwise max(0, x).
pub fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    out
}

/// Elementwise log(1 + max(0, x)), the saturation applied to term weights.
pub fn log1p_clamp(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in &mut out.data {
        *v = v.max(0.0).ln_1p();
    }
    out
}

/// Stable log(sum(exp(row))) for each row, as an n x 1 column.
pub fn row_logsumexp(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows, 1);
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        out.data[r] = max + sum.ln();
    }
    out
}
