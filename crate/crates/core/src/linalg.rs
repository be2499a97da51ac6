//! Dense row-major `f64` matrices and the handful of factorizations the
//! dynamics code needs: products, norms, trace, a one-sided Jacobi SVD and a
//! Householder QR.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Sweep cap for the Jacobi SVD.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal Gram threshold at which a Jacobi sweep counts as converged.
pub const SVD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: expected a square matrix, got {shape:?}")]
    NotSquare {
        op: &'static str,
        shape: (usize, usize),
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("expected {expected} entries for the requested shape, got {got}")]
    DataLength { expected: usize, got: usize },
    #[error("{op}: input contains non-finite entries")]
    NonFinite { op: &'static str },
    #[error("svd did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::DataLength {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Rectangular diagonal matrix with `diag` on the leading diagonal.
    pub fn rect_diag(rows: usize, cols: usize, diag: &[f64]) -> Self {
        assert!(
            diag.len() <= rows.min(cols),
            "diagonal longer than min(rows, cols)"
        );
        let mut m = Self::zeros(rows, cols);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * cols + i] = d;
        }
        m
    }

    pub fn diag(diag: &[f64]) -> Self {
        Self::rect_diag(diag.len(), diag.len(), diag)
    }

    /// Column vector from a slice.
    pub fn column_vector(v: &[f64]) -> Result<Self> {
        Self::from_vec(v.len(), 1, v.to_vec())
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols + j])
            .collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = v;
        }
    }

    /// Leading `n` columns.
    pub fn leading_columns(&self, n: usize) -> Matrix {
        assert!(n > 0 && n <= self.cols);
        Matrix::from_fn(self.rows, n, |i, j| self[(i, j)])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LinalgError::Shape {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix { data, ..*self })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|a| alpha * a).collect(),
            ..*self
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|&a| f(a)).collect(),
            ..*self
        }
    }

    /// `self · selfᵀ`.
    pub fn gram_rows(&self) -> Matrix {
        let n = self.rows;
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                g.data[i * n + j] = v;
                g.data[j * n + i] = v;
            }
        }
        g
    }

    /// `selfᵀ · self`.
    pub fn gram_cols(&self) -> Matrix {
        self.transpose().gram_rows()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn spectral_norm(&self) -> Result<f64> {
        spectral_norm(self)
    }

    pub fn trace(&self) -> Result<f64> {
        trace(self)
    }

    pub fn svd(&self) -> Result<Svd> {
        svd(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
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

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let n = b.cols;
    let mut out = Matrix::zeros(a.rows, n);
    // i-k-j order keeps the inner loop contiguous in both `b` and `out`.
    for (a_row, out_row) in a
        .data
        .chunks_exact(a.cols)
        .zip(out.data.chunks_exact_mut(n))
    {
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn trace(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            op: "trace",
            shape: a.shape(),
        });
    }
    Ok((0..a.rows).map(|i| a[(i, i)]).sum())
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(svd(a)?.sigma[0])
}

/// Thin SVD `a = u · diag(sigma) · vᵀ` with `r = min(rows, cols)` singular triplets.
#[derive(Debug, Clone)]
pub struct Svd {
    /// rows × r, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// cols × r, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let r = self.sigma.len();
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for (k, s) in self.sigma.iter().enumerate().take(r) {
                us[(i, k)] *= s;
            }
        }
        matmul(&us, &self.v.transpose()).expect("svd factors conform")
    }

    /// Number of singular values above `rel_tol * sigma_max`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let smax = self.sigma.first().copied().unwrap_or(0.0);
        if smax == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > rel_tol * smax).count()
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite { op: "svd" });
    }
    if a.rows < a.cols {
        let t = jacobi_tall(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    jacobi_tall(a)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn jacobi_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    // Column-major working copies: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n == 1;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut max_off: f64 = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                max_off = max_off.max(off);
                if off <= f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = max_off < SVD_TOLERANCE;
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            sweeps: SVD_MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = sigma[0];
    let degenerate = smax * (m.max(n) as f64) * f64::EPSILON;

    let mut ucols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            (norms[j] > degenerate && norms[j] > 0.0)
                .then(|| cols[j].iter().map(|x| x / norms[j]).collect())
        })
        .collect();
    orthonormalize_with_completion(&mut ucols, m);

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        u.set_column(k, ucols[k].as_ref().expect("completed"));
        v.set_column(k, &vcols[j]);
    }
    Ok(Svd { u, sigma, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Modified Gram-Schmidt over `cols` in order; `None` entries (and columns that
/// collapse under projection) are replaced by orthogonalized unit vectors.
fn orthonormalize_with_completion(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for slot in cols.iter_mut() {
        let accepted = slot.take().and_then(|mut c| {
            project_out(&mut c, &basis);
            let nrm = dot(&c, &c).sqrt();
            (nrm > 0.5).then(|| c.iter().map(|x| x / nrm).collect::<Vec<_>>())
        });
        let col = accepted.unwrap_or_else(|| unit_completion(&basis, dim));
        basis.push(col.clone());
        *slot = Some(col);
    }
}

fn project_out(c: &mut [f64], basis: &[Vec<f64>]) {
    // Two passes keep the result orthogonal to working precision.
    for _ in 0..2 {
        for b in basis {
            let proj = dot(c, b);
            for (x, y) in c.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
    }
}

/// Picks the standard basis vector with the largest residual against `basis`.
fn unit_completion(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        project_out(&mut e, basis);
        let nrm = dot(&e, &e).sqrt();
        if best.as_ref().is_none_or(|(b, _)| nrm > *b) {
            best = Some((nrm, e));
        }
    }
    let (nrm, e) = best.expect("dim > 0");
    assert!(nrm > 1e-8, "cannot complete a full basis");
    e.iter().map(|x| x / nrm).collect()
}

/// Extends the orthonormal columns of `q` (m×k, k ≤ m) to an m×m orthogonal matrix.
pub fn orthonormal_completion(q: &Matrix) -> Matrix {
    let (m, k) = q.shape();
    assert!(k <= m, "more columns than rows");
    let mut cols: Vec<Option<Vec<f64>>> = (0..m).map(|j| (j < k).then(|| q.column(j))).collect();
    orthonormalize_with_completion(&mut cols, m);
    let mut out = Matrix::zeros(m, m);
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c.as_ref().expect("completed"));
    }
    out
}

/// Householder QR of a tall matrix: `a = q · r` with `q` m×n orthonormal columns
/// and `r` n×n upper triangular.
pub fn qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LinalgError::Shape {
            op: "qr",
            left: a.shape(),
            right: (n, n),
        });
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        let alpha = -v[0].signum() * dot(&v, &v).sqrt();
        v[0] -= alpha;
        let vnorm = dot(&v, &v).sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|x| *x /= vnorm);
            for j in k..n {
                let proj: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
                for i in k..m {
                    r[(i, j)] -= 2.0 * v[i - k] * proj;
                }
            }
        }
        reflectors.push(v);
    }
    let mut q = Matrix::rect_diag(m, n, &vec![1.0; n]);
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for j in 0..n {
            let proj: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
            for i in k..m {
                q[(i, j)] -= 2.0 * v[i - k] * proj;
            }
        }
    }
    let r = Matrix::from_fn(n, n, |i, j| if i <= j { r[(i, j)] } else { 0.0 });
    Ok((q, r))
}
