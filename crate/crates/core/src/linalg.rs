//! Minimal dense linear algebra over `f64`.
//!
//! Everything the metrics and the model need, and nothing more: a row-major
//! [`Matrix`], products (with transposed variants for backpropagation),
//! Frobenius norm, column centering and a one-sided Jacobi singular value
//! solver.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sweep limit for the Jacobi solver.
const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal threshold, relative to the Frobenius norm.
const JACOBI_TOL: f64 = 1e-12;
/// Rotations below this fraction of `sqrt(alpha * beta)` cannot change the
/// column norms in floating point and are skipped.
const JACOBI_REL_EPS: f64 = 1e-15;
/// Singular values below `CLAMP * sigma_max` are reported as exactly zero.
const SPECTRUM_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid matrix: {rows}x{cols} with {len} values")]
    InvalidShape { rows: usize, cols: usize, len: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{op}: non-finite entry in input")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols))
                .finish()
        } else {
            write!(f, "[..]")
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinalgError::InvalidShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics on a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Diagonal `rows x cols` matrix with `diag` on the leading diagonal.
    pub fn diag(rows: usize, cols: usize, diag: &[f64]) -> Self {
        let mut m = Self::zeros(rows, cols);
        for (i, &d) in diag.iter().enumerate().take(rows.min(cols)) {
            m.data[i * cols + i] = d;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics if rows are ragged or empty.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.as_ref().len(), cols, "ragged rows");
                r.as_ref().iter().copied()
            })
            .collect();
        Self::new(rows.len(), cols, data).expect("non-empty rows")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += other`. Panics on shape mismatch.
    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::ShapeMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut m = self.clone();
        m.add_assign(other);
        Ok(m)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

#[derive(Clone, Copy)]
enum Op {
    N,
    T,
}

/// `c = op(a) * op(b)` through `matrixmultiply`, using strides for transposes.
fn gemm(op: &'static str, a: &Matrix, ta: Op, b: &Matrix, tb: Op) -> Result<Matrix> {
    let (m, k, rsa, csa) = match ta {
        Op::N => (a.rows, a.cols, a.cols as isize, 1),
        Op::T => (a.cols, a.rows, 1, a.cols as isize),
    };
    let (kb, n, rsb, csb) = match tb {
        Op::N => (b.rows, b.cols, b.cols as isize, 1),
        Op::T => (b.cols, b.rows, 1, b.cols as isize),
    };
    if k != kb {
        return Err(LinalgError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(m, n);
    // SAFETY: the dimensions and strides above describe exactly the
    // allocations of `a`, `b` and `c`, which do not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

/// Standard product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm("matmul", a, Op::N, b, Op::N)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm("matmul_tn", a, Op::T, b, Op::N)
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm("matmul_nt", a, Op::N, b, Op::T)
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Subtracts each column's mean. Requires at least two rows.
pub fn center_columns(a: &Matrix) -> Result<Matrix> {
    if a.rows < 2 {
        return Err(LinalgError::Degenerate(format!(
            "centering needs at least 2 rows, got {}",
            a.rows
        )));
    }
    let mut means = vec![0.0; a.cols];
    for r in 0..a.rows {
        for (m, v) in means.iter_mut().zip(a.row(r)) {
            *m += v;
        }
    }
    let n = a.rows as f64;
    means.iter_mut().for_each(|m| *m /= n);
    let mut out = a.clone();
    for r in 0..a.rows {
        for (v, m) in out.row_mut(r).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    Ok(out)
}

/// Singular values, sorted descending, length `min(rows, cols)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularSpectrum {
    values: Vec<f64>,
}

impl SingularSpectrum {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Number of non-zero (post-clamp) singular values.
    pub fn rank(&self) -> usize {
        self.values.iter().filter(|&&s| s > 0.0).count()
    }
}

/// Singular values by one-sided (Hestenes) Jacobi.
///
/// Columns of the narrower orientation are orthogonalized pairwise until
/// every pair has `|c_p · c_q| <= (1e-12 ‖A‖_F)²` or is below relative
/// machine precision; the singular values are then the column norms.
pub fn singular_values(a: &Matrix) -> Result<SingularSpectrum> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite {
            op: "singular_values",
        });
    }
    // Column-major working copy of the orientation with fewer columns.
    let (m, n, mut cols) = if a.cols <= a.rows {
        (a.rows, a.cols, a.transpose().data)
    } else {
        (a.cols, a.rows, a.data.clone())
    };
    let fro2: f64 = cols.iter().map(|v| v * v).sum();
    if fro2 == 0.0 {
        return Ok(SingularSpectrum {
            values: vec![0.0; n],
        });
    }
    let abs_tol = JACOBI_TOL * JACOBI_TOL * fro2;

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (head, tail) = cols.split_at_mut(q * m);
                let cp = &mut head[p * m..(p + 1) * m];
                let cq = &mut tail[..m];
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (x, y) in cp.iter().zip(cq.iter()) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= abs_tol || gamma.abs() <= JACOBI_REL_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut values: Vec<f64> = cols
        .chunks(m)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    values.sort_by(|x, y| y.total_cmp(x));
    let cutoff = SPECTRUM_CLAMP * values[0];
    for v in values.iter_mut() {
        if *v < cutoff {
            *v = 0.0;
        }
    }
    Ok(SingularSpectrum { values })
}
