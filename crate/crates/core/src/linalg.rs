//! Small dense matrices.
//!
//! Everything here operates on matrices of dimension at most a few dozen:
//! cluster-sized correlation blocks and `p × p` information matrices. The
//! storage is row-major and the algorithms are the textbook ones (cyclic
//! Jacobi for symmetric eigenproblems, Cholesky for SPD solves, partial
//! pivoting LU for general solves and determinants).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Index, IndexMut};

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Maximum absolute asymmetry tolerated by the symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Relative off-diagonal tolerance at which a Jacobi sweep stops.
pub const JACOBI_TOL: f64 = 1e-12;

/// Upper bound on Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Smallest pivot accepted by the Cholesky factorization.
pub const PD_PIVOT_MIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum LinalgError {
    /// Data length does not match the declared shape.
    InvalidShape {
        rows: usize,
        cols: usize,
        len: usize,
    },
    /// Operand shapes are incompatible.
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    NotSquare {
        rows: usize,
        cols: usize,
    },
    /// NaN or infinite entry.
    NonFinite,
    /// Largest absolute difference `|m_ij - m_ji|` exceeded [`SYMMETRY_TOL`].
    NotSymmetric {
        max_asymmetry: f64,
    },
    NotPositiveDefinite {
        lambda_min: f64,
    },
    Singular,
    /// Jacobi iteration hit the sweep limit.
    NoConvergence,
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::InvalidShape { rows, cols, len } => {
                write!(
                    f,
                    "expected {rows}x{cols} = {} entries, got {len}",
                    rows * cols
                )
            }
            LinalgError::DimensionMismatch { expected, got } => write!(
                f,
                "dimension mismatch: expected {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            LinalgError::NotSquare { rows, cols } => {
                write!(f, "matrix must be square, got {rows}x{cols}")
            }
            LinalgError::NonFinite => write!(f, "matrix has non-finite entries"),
            LinalgError::NotSymmetric { max_asymmetry } => {
                write!(
                    f,
                    "matrix is not symmetric (max asymmetry {max_asymmetry:e})"
                )
            }
            LinalgError::NotPositiveDefinite { lambda_min } => {
                write!(
                    f,
                    "matrix is not positive definite (lambda_min = {lambda_min:e})"
                )
            }
            LinalgError::Singular => write!(f, "matrix is singular"),
            LinalgError::NoConvergence => write!(f, "Jacobi eigenvalue iteration did not converge"),
        }
    }
}

impl core::error::Error for LinalgError {}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row slices.
    ///
    /// # Panics
    /// Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector.
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * rhs`.
    ///
    /// # Panics
    /// Panics when inner dimensions differ.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = out.row_mut(i);
                for (o, &b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn tr_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "tr_matmul row mismatch");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let lrow = self.row(k);
            let rrow = rhs.row(k);
            for (i, &a) in lrow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = out.row_mut(i);
                for (o, &b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ * v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_mul_vec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (k, &vk) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(k)) {
                *o += a * vk;
            }
        }
        out
    }

    pub fn add(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix { data, ..*self }
    }

    pub fn sub(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix { data, ..*self }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|a| a * c).collect(),
            ..*self
        }
    }

    /// `self += c * rhs`.
    pub fn add_scaled(&mut self, c: f64, rhs: &Matrix) {
        assert_eq!(self.shape(), rhs.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += c * b;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `max |m_ij - m_ji|`; only meaningful for square matrices.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetric_part(&self) -> Matrix {
        assert!(self.is_square(), "symmetric_part needs a square matrix");
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self[(i, j)] + self[(j, i)])
        })
    }

    /// Leading `k × k` principal submatrix.
    pub fn principal(&self, k: usize) -> Matrix {
        assert!(
            k <= self.rows && k <= self.cols,
            "principal block too large"
        );
        Matrix::from_fn(k, k, |i, j| self[(i, j)])
    }

    /// Scales row `i` by `d[i]`, i.e. `diag(d) * self`.
    pub fn scale_rows(&self, d: &[f64]) -> Matrix {
        assert_eq!(d.len(), self.rows);
        Matrix::from_fn(self.rows, self.cols, |i, j| d[i] * self[(i, j)])
    }

    /// Scales column `j` by `d[j]`, i.e. `self * diag(d)`.
    pub fn scale_cols(&self, d: &[f64]) -> Matrix {
        assert_eq!(d.len(), self.cols);
        Matrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)] * d[j])
    }

    fn require_square(&self) -> Result<(), LinalgError> {
        if self.is_square() {
            Ok(())
        } else {
            Err(LinalgError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    fn require_finite(&self) -> Result<(), LinalgError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(LinalgError::NonFinite)
        }
    }

    /// Validates symmetry within [`SYMMETRY_TOL`] and returns the exactly
    /// symmetrized copy.
    pub fn checked_symmetric(&self) -> Result<Matrix, LinalgError> {
        self.require_square()?;
        self.require_finite()?;
        let max_asymmetry = self.max_asymmetry();
        if max_asymmetry > SYMMETRY_TOL {
            return Err(LinalgError::NotSymmetric { max_asymmetry });
        }
        Ok(self.symmetric_part())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Outer product `u vᵀ`.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenExtremes {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// Full eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: Matrix,
}

impl SymmetricEigen {
    pub fn new(m: &Matrix) -> Result<Self, LinalgError> {
        let a = m.checked_symmetric()?;
        jacobi(a)
    }

    pub fn extremes(&self) -> EigenExtremes {
        EigenExtremes {
            lambda_min: self.values.first().copied().unwrap_or(0.0),
            lambda_max: self.values.last().copied().unwrap_or(0.0),
        }
    }

    /// `V f(Λ) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| self.vectors[(i, k)] * fv[k] * self.vectors[(j, k)])
                .sum()
        })
    }
}

fn jacobi(mut a: Matrix) -> Result<SymmetricEigen, LinalgError> {
    let n = a.rows();
    let mut v = Matrix::identity(n);
    let scale = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = n < 2 || scale == 0.0;
    let mut sweep = 0;
    while !converged {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)] * a[(p, q)])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            converged = true;
            break;
        }
        if sweep == JACOBI_MAX_SWEEPS {
            break;
        }
        sweep += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymmetricEigen { values, vectors })
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eigen_extremes(m: &Matrix) -> Result<EigenExtremes, LinalgError> {
    Ok(SymmetricEigen::new(m)?.extremes())
}

/// `Mᵀ M`, exactly symmetric.
pub fn gram(m: &Matrix) -> Matrix {
    let n = m.cols();
    let mut g = Matrix::zeros(n, n);
    for k in 0..m.rows() {
        let r = m.row(k);
        for i in 0..n {
            for j in i..n {
                g[(i, j)] += r[i] * r[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            g[(i, j)] = g[(j, i)];
        }
    }
    g
}

/// Operator 2-norm `sup_{|x|=1} |Mx|`; any shape.
pub fn spectral_norm(m: &Matrix) -> Result<f64, LinalgError> {
    m.require_finite()?;
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(0.0);
    }
    let ext = sym_eigen_extremes(&gram(m))?;
    Ok(ext.lambda_max.max(0.0).sqrt())
}

/// `sup |xᵀ M x|` over real unit vectors, i.e. the largest absolute
/// eigenvalue of the symmetric part. Equals [`numerical_radius`] for
/// symmetric `M` and can be smaller otherwise (zero for skew matrices).
pub fn real_numerical_radius(m: &Matrix) -> Result<f64, LinalgError> {
    m.require_square()?;
    m.require_finite()?;
    let ext = sym_eigen_extremes(&m.symmetric_part())?;
    Ok(ext.lambda_min.abs().max(ext.lambda_max.abs()))
}

/// Grid resolution for the angular search in [`numerical_radius`].
const RADIUS_GRID: usize = 64;

/// Numerical radius `sup_{|x|=1} |x* M x|` over complex unit vectors, so that
/// `w(M) ≤ ‖M‖ ≤ 2 w(M)` holds for every square `M`.
///
/// Uses `w(M) = max_θ ρ(H(θ))` with `H(θ) = cos θ S + i sin θ K`, `S` and `K`
/// the symmetric and skew parts; `ρ(H(θ))` is even and π-periodic, so
/// `θ ∈ [0, π/2]` suffices. Each Hermitian `H(θ)` is handled through its
/// real symmetric embedding `[[A, -B], [B, A]]`.
pub fn numerical_radius(m: &Matrix) -> Result<f64, LinalgError> {
    m.require_square()?;
    m.require_finite()?;
    let s = m.symmetric_part();
    let k = m.sub(&s);
    let base = real_numerical_radius(m)?;
    if k.max_abs() == 0.0 {
        return Ok(base);
    }
    let n = m.rows();
    let rho = |theta: f64| -> Result<f64, LinalgError> {
        let (sn, cs) = (theta.sin(), theta.cos());
        let emb = Matrix::from_fn(2 * n, 2 * n, |i, j| {
            let (bi, ri) = (i / n, i % n);
            let (bj, rj) = (j / n, j % n);
            match (bi, bj) {
                (0, 0) | (1, 1) => cs * s[(ri, rj)],
                (0, 1) => -sn * k[(ri, rj)],
                _ => sn * k[(ri, rj)],
            }
        });
        let e = sym_eigen_extremes(&emb)?;
        Ok(e.lambda_min.abs().max(e.lambda_max.abs()))
    };
    let h = core::f64::consts::FRAC_PI_2 / RADIUS_GRID as f64;
    let vals = (0..=RADIUS_GRID)
        .map(|i| rho(i as f64 * h))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = vals.iter().copied().fold(base, f64::max);
    // refine every grid-local maximum by golden-section search
    for i in 0..=RADIUS_GRID {
        let left = if i == 0 { vals[1] } else { vals[i - 1] };
        let right = if i == RADIUS_GRID { vals[i - 1] } else { vals[i + 1] };
        if vals[i] < left || vals[i] < right {
            continue;
        }
        let (mut a, mut b) = ((i as f64 - 1.0) * h, (i as f64 + 1.0) * h);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (rho(c)?, rho(d)?);
        // the value error is quadratic in the bracket width
        for _ in 0..80 {
            if b - a < 1e-10 {
                break;
            }
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = rho(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = rho(d)?;
            }
        }
        best = best.max(fc).max(fd);
    }
    Ok(best)
}

/// Lower-triangular Cholesky factor `M = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(m: &Matrix) -> Result<Self, LinalgError> {
        let a = m.checked_symmetric()?;
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > PD_PIVOT_MIN) {
                let lambda_min = sym_eigen_extremes(&a).map_or(f64::NAN, |e| e.lambda_min);
                return Err(LinalgError::NotPositiveDefinite { lambda_min });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `M x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve(&self, b: &Matrix) -> Result<Matrix, LinalgError> {
        if b.rows() != self.dim() {
            return Err(LinalgError::DimensionMismatch {
                expected: (self.dim(), b.cols()),
                got: b.shape(),
            });
        }
        let mut out = Matrix::zeros(b.rows(), b.cols());
        let mut col = vec![0.0; b.rows()];
        for j in 0..b.cols() {
            for i in 0..b.rows() {
                col[i] = b[(i, j)];
            }
            self.solve_in_place(&mut col);
            for i in 0..b.rows() {
                out[(i, j)] = col[i];
            }
        }
        Ok(out)
    }

    pub fn inverse(&self) -> Matrix {
        let inv = self
            .solve(&Matrix::identity(self.dim()))
            .expect("identity has matching shape");
        inv.symmetric_part()
    }

    pub fn det(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.l[(i, i)] * self.l[(i, i)])
            .product()
    }
}

/// Solves `M X = B` for symmetric positive-definite `M`.
pub fn spd_solve(m: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    b.require_finite()?;
    Cholesky::new(m)?.solve(b)
}

/// LU factorization with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
    singular: bool,
}

impl Lu {
    pub fn new(m: &Matrix) -> Result<Self, LinalgError> {
        m.require_square()?;
        m.require_finite()?;
        let n = m.rows();
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let mut singular = false;
        for k in 0..n {
            let (piv, pmax) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold(
                    (k, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            if pmax == 0.0 {
                singular = true;
                continue;
            }
            if piv != k {
                for j in 0..n {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(piv, j)];
                    lu[(piv, j)] = t;
                }
                perm.swap(k, piv);
                sign = -sign;
            }
            let pivot = lu[(k, k)];
            for i in (k + 1)..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[(i, j)] -= f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Self {
            lu,
            perm,
            sign,
            singular,
        })
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    pub fn det(&self) -> f64 {
        if self.singular {
            return 0.0;
        }
        self.sign
            * (0..self.lu.rows())
                .map(|i| self.lu[(i, i)])
                .product::<f64>()
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if self.singular {
            return Err(LinalgError::Singular);
        }
        let n = self.lu.rows();
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[(i, k)] * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                x[i] -= self.lu[(i, k)] * x[k];
            }
            x[i] /= self.lu[(i, i)];
        }
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(LinalgError::Singular)
        }
    }

    pub fn inverse(&self) -> Result<Matrix, LinalgError> {
        let n = self.lu.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve_vec(&e)?;
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        Ok(inv)
    }
}

/// Determinant via LU.
pub fn det(m: &Matrix) -> Result<f64, LinalgError> {
    Ok(Lu::new(m)?.det())
}

/// Symmetric square root `V Λ^{1/2} Vᵀ` of a positive semidefinite matrix.
pub fn sym_sqrt(m: &Matrix) -> Result<Matrix, LinalgError> {
    let e = SymmetricEigen::new(m)?;
    if e.extremes().lambda_min < -SYMMETRY_TOL {
        return Err(LinalgError::NotPositiveDefinite {
            lambda_min: e.extremes().lambda_min,
        });
    }
    Ok(e.map(|l| l.max(0.0).sqrt()))
}
