//! Dense rank-3 tensor arithmetic: fold/unfold matricization and mode-k
//! products.
//!
//! Conventions used throughout the crate:
//! - A `Tensor3` with shape `(n1, n2, n3)` stores its entries row-major,
//!   i.e. `data[(i * n2 + j) * n3 + k]` holds entry `(i, j, k)`.
//! - `unfold(t, mode)` produces the matrix whose row `r` collects every
//!   entry with index `r` along `mode`; the remaining two axes are
//!   linearized in increasing mode order, row-major. `fold` is the exact
//!   inverse, so `fold(unfold(t, k), k, t.shape()) == t` elementwise.
//! - The mode-k product contracts a matrix against the chosen axis:
//!   `mode_product(t, M) = fold(M * unfold(t, k), k, ..)` where the length
//!   of axis `k` becomes `M.rows`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("invalid mode {0}, expected 1, 2 or 3")]
    InvalidMode(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

/// Dense rank-3 tensor with canonical (variate, temporal, level) axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: (usize, usize, usize),
    data: Vec<f64>,
}

/// Dense row-major matrix, the result of unfolding a `Tensor3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// A transform factor bound to one tensor mode, for use with `mode_product`.
#[derive(Debug, Clone)]
pub struct ModeMatrix {
    pub mode: usize,
    pub matrix: Matrix,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        crate::graph::dgemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            &other.data,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

impl Tensor3 {
    /// Builds a tensor from external data, rejecting NaN/Inf entries.
    pub fn new(shape: (usize, usize, usize), data: Vec<f64>) -> Result<Self, TensorError> {
        let (n1, n2, n3) = shape;
        if data.len() != n1 * n2 * n3 {
            return Err(TensorError::ShapeMismatch(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                n1,
                n2,
                n3
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Tensor3 { shape, data })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Tensor3 {
            shape,
            data: vec![0.0; shape.0 * shape.1 * shape.2],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        let (_, n2, n3) = self.shape;
        self.data[(i * n2 + j) * n3 + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let (_, n2, n3) = self.shape;
        self.data[(i * n2 + j) * n3 + k] = v;
    }

    pub fn len_along(&self, mode: usize) -> Result<usize, TensorError> {
        match mode {
            1 => Ok(self.shape.0),
            2 => Ok(self.shape.1),
            3 => Ok(self.shape.2),
            m => Err(TensorError::InvalidMode(m)),
        }
    }
}

/// Row/column position of tensor entry `(i, j, k)` in the mode-`mode`
/// unfolding. The non-target axes are linearized in increasing mode order.
pub fn unfold_position(
    shape: (usize, usize, usize),
    mode: usize,
    i: usize,
    j: usize,
    k: usize,
) -> Result<(usize, usize), TensorError> {
    let (_, n2, n3) = shape;
    match mode {
        1 => Ok((i, j * n3 + k)),
        2 => Ok((j, i * n3 + k)),
        3 => Ok((k, i * n2 + j)),
        m => Err(TensorError::InvalidMode(m)),
    }
}

/// Matrix dimensions of the mode-`mode` unfolding of a tensor with `shape`.
pub fn unfold_dims(
    shape: (usize, usize, usize),
    mode: usize,
) -> Result<(usize, usize), TensorError> {
    let (n1, n2, n3) = shape;
    match mode {
        1 => Ok((n1, n2 * n3)),
        2 => Ok((n2, n1 * n3)),
        3 => Ok((n3, n1 * n2)),
        m => Err(TensorError::InvalidMode(m)),
    }
}

/// Matricizes `t` along `mode`.
pub fn unfold(t: &Tensor3, mode: usize) -> Result<Matrix, TensorError> {
    let (rows, cols) = unfold_dims(t.shape, mode)?;
    let mut m = Matrix::zeros(rows, cols);
    let (n1, n2, n3) = t.shape;
    let mut idx = 0;
    for i in 0..n1 {
        for j in 0..n2 {
            for k in 0..n3 {
                let (r, c) = unfold_position(t.shape, mode, i, j, k)?;
                m.data[r * cols + c] = t.data[idx];
                idx += 1;
            }
        }
    }
    Ok(m)
}

/// Inverse of `unfold`: rebuilds the tensor of `shape` from its mode-`mode`
/// matricization.
pub fn fold(
    m: &Matrix,
    mode: usize,
    shape: (usize, usize, usize),
) -> Result<Tensor3, TensorError> {
    let (rows, cols) = unfold_dims(shape, mode)?;
    if m.rows != rows || m.cols != cols {
        return Err(TensorError::ShapeMismatch(format!(
            "fold of {}x{} into shape {:?} along mode {} (expected {}x{})",
            m.rows, m.cols, shape, mode, rows, cols
        )));
    }
    let (n1, n2, n3) = shape;
    let mut t = Tensor3::zeros(shape);
    let mut idx = 0;
    for i in 0..n1 {
        for j in 0..n2 {
            for k in 0..n3 {
                let (r, c) = unfold_position(shape, mode, i, j, k)?;
                t.data[idx] = m.data[r * cols + c];
                idx += 1;
            }
        }
    }
    Ok(t)
}

/// Mode product `t x_k M`: the length along `M.mode` becomes `M.rows`.
pub fn mode_product(t: &Tensor3, m: &ModeMatrix) -> Result<Tensor3, TensorError> {
    let n_mode = t.len_along(m.mode)?;
    if m.matrix.cols != n_mode {
        return Err(TensorError::ShapeMismatch(format!(
            "mode-{} product: factor has {} cols, tensor length along mode is {}",
            m.mode, m.matrix.cols, n_mode
        )));
    }
    let unf = unfold(t, m.mode)?;
    let prod = m.matrix.matmul(&unf)?;
    let (n1, n2, n3) = t.shape;
    let new_shape = match m.mode {
        1 => (m.matrix.rows, n2, n3),
        2 => (n1, m.matrix.rows, n3),
        _ => (n1, n2, m.matrix.rows),
    };
    fold(&prod, m.mode, new_shape)
}
