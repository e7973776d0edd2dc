//! Dense row-major matrices and the truncated SVD behind the closed-form
//! growth initializer.
//!
//! The SVD only ever needs left singular vectors, so it works on the Gram
//! matrix of the smaller dimension: a cyclic Jacobi eigendecomposition of
//! `A Aᵀ` (or `Aᵀ A` followed by a back-multiplication when the matrix is
//! tall). Fixed sweep order keeps the result bit-deterministic, and a sign
//! convention (first entry above 1e-12 is positive) pins each vector.

use crate::{lit, Error, Result, Scalar};

/// Singular values below this are treated as rank-deficient and their
/// vectors completed from the null space.
const RANK_TOL: f64 = 1e-12;

/// Dense real matrix, row-major.
///
/// Constructors reject non-finite entries; arithmetic trusts its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Construct without the finite check; internal arithmetic only.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_parts(rows, cols, data)
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// `self * rhs`
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(m, n, out))
    }

    /// `selfᵀ * rhs`
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::Dimension(format!(
                "matmul_tn {}x{} , {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, k, n) = (self.cols, self.rows, rhs.cols);
        let mut out = vec![T::zero(); m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &rhs.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(m, n, out))
    }

    /// `self * rhsᵀ`
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::Dimension(format!(
                "matmul_nt {}x{} , {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.rows);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &rhs.data[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&a, &b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                *o = acc;
            }
        }
        Ok(Self::from_parts(m, n, out))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip(rhs, |a, b| a - b)
    }

    fn zip(&self, rhs: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::Dimension(format!(
                "elementwise {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.rows, self.cols, data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn scale_mut(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vec<T> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect()
    }

    /// Rescale so the Frobenius norm equals `target`; zero matrices are left
    /// untouched when the target is zero.
    pub fn rescaled_to(&self, target: T) -> Result<Self> {
        if target == T::zero() {
            return Ok(Self::zeros(self.rows, self.cols));
        }
        let norm = self.frobenius_norm();
        if norm == T::zero() {
            return Err(Error::Numeric(
                "cannot rescale a zero matrix to a nonzero norm".into(),
            ));
        }
        Ok(self.scaled(target / norm))
    }

    pub fn append_rows(&mut self, extra: &Self) -> Result<()> {
        if extra.cols != self.cols {
            return Err(Error::Dimension(format!(
                "append_rows: {} cols vs {}",
                extra.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&extra.data);
        self.rows += extra.rows;
        Ok(())
    }

    pub fn append_cols(&mut self, extra: &Self) -> Result<()> {
        if extra.rows != self.rows {
            return Err(Error::Dimension(format!(
                "append_cols: {} rows vs {}",
                extra.rows, self.rows
            )));
        }
        let new_cols = self.cols + extra.cols;
        let mut data = Vec::with_capacity(self.rows * new_cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(extra.row(r));
        }
        self.data = data;
        self.cols = new_cols;
        Ok(())
    }

    /// Columns restricted to `indices` (in the given order).
    pub fn select_columns(&self, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&i| i >= self.cols) {
            return Err(Error::Index("column index out of range".into()));
        }
        let mut out = Self::zeros(self.rows, indices.len());
        for r in 0..self.rows {
            for (j, &c) in indices.iter().enumerate() {
                out.data[r * indices.len() + j] = self.get(r, c);
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> T {
        debug_assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Top-k left singular vectors and singular values.
#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    /// rows x k, columns orthonormal.
    pub left_vectors: Matrix<T>,
    /// Non-increasing, all >= 0.
    pub singular_values: Vec<T>,
}

/// Truncated SVD: the top `k` left singular vectors and values of `a`.
///
/// Deterministic: fixed Jacobi sweep order plus the sign convention that the
/// first entry of each vector above 1e-12 in magnitude is positive. When
/// fewer than `k` singular values exceed 1e-12 the remaining columns are
/// completed to an orthonormal set from the null space.
pub fn svd_topk<T: Scalar>(a: &Matrix<T>, k: usize) -> Result<SvdResult<T>> {
    let (m, n) = a.shape();
    if k == 0 || k > m.min(n) {
        return Err(Error::Dimension(format!(
            "svd_topk: k={k} out of range for {m}x{n}"
        )));
    }
    let rank_tol = lit::<T>(RANK_TOL);

    let (sigma, mut u) = if m <= n {
        // Eigenvectors of A Aᵀ are the left singular vectors directly.
        let gram = a.matmul_nt(a)?;
        let (vals, vecs) = jacobi_eigen_sym(&gram)?;
        let sigma: Vec<T> = vals[..k].iter().map(|&v| v.max(T::zero()).sqrt()).collect();
        let mut u = Matrix::zeros(m, k);
        for j in 0..k {
            for r in 0..m {
                u.set(r, j, vecs.get(r, j));
            }
        }
        (sigma, u)
    } else {
        // Tall matrix: eigenvectors of Aᵀ A give right vectors; map through A.
        let gram = a.matmul_tn(a)?;
        let (vals, vecs) = jacobi_eigen_sym(&gram)?;
        let sigma: Vec<T> = vals[..k].iter().map(|&v| v.max(T::zero()).sqrt()).collect();
        let mut u = Matrix::zeros(m, k);
        for j in 0..k {
            if sigma[j] > rank_tol {
                let v = vecs.column(j);
                for r in 0..m {
                    let mut acc = T::zero();
                    for (c, &vc) in v.iter().enumerate() {
                        acc += a.get(r, c) * vc;
                    }
                    u.set(r, j, acc / sigma[j]);
                }
            }
        }
        (sigma, u)
    };

    orthonormalize_with_completion(&mut u, &sigma, rank_tol)?;
    fix_signs(&mut u);
    Ok(SvdResult {
        left_vectors: u,
        singular_values: sigma,
    })
}

/// Alignment of two sets of k orthonormal vectors: `|trace(U1ᵀ U2)| / k`.
///
/// 1 means identical subspaces with matched directions; 0 means orthogonal.
pub fn alignment<T: Scalar>(u1: &Matrix<T>, u2: &Matrix<T>, k: usize) -> Result<T> {
    if u1.shape() != u2.shape() || u1.cols() != k {
        return Err(Error::Dimension(format!(
            "alignment: {}x{} vs {}x{} with k={k}",
            u1.rows(),
            u1.cols(),
            u2.rows(),
            u2.cols()
        )));
    }
    let trace: T = u1.data().iter().zip(u2.data()).map(|(&a, &b)| a * b).sum();
    Ok(trace.abs() / lit::<T>(k as f64))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues sorted non-increasing (stable sort, so equal values
/// keep discovery order) with matching eigenvector columns.
fn jacobi_eigen_sym<T: Scalar>(b: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
    let n = b.rows();
    debug_assert_eq!(n, b.cols());
    let mut a = b.clone();
    let mut v = Matrix::identity(n);
    if n == 1 {
        return Ok((vec![a.get(0, 0)], v));
    }

    let scale = b.frobenius_norm();
    let target = scale * lit::<T>(1e-15) * lit::<T>(n as f64);
    let max_sweeps = 100;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        let off = (off + off).sqrt();
        if off <= target || scale == T::zero() {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= scale * lit::<T>(1e-18) {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let tau = (aqq - app) / (lit::<T>(2.0) * apq);
                let t = if tau >= T::zero() {
                    T::one() / (tau + (T::one() + tau * tau).sqrt())
                } else {
                    -T::one() / (-tau + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of A.
                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for j in 0..n {
                    let apj = a.get(p, j);
                    let aqj = a.get(q, j);
                    a.set(p, j, c * apj - s * aqj);
                    a.set(q, j, s * apj + c * aqj);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    if !converged {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        return Err(Error::Numeric(format!(
            "jacobi eigendecomposition did not converge after {max_sweeps} sweeps \
             (off-diagonal residual {:?})",
            (off + off).sqrt()
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j)
            .partial_cmp(&a.get(i, i))
            .expect("finite eigenvalues")
    });
    let vals: Vec<T> = order.iter().map(|&i| a.get(i, i)).collect();
    let vecs = v.select_columns(&order)?;
    Ok((vals, vecs))
}

/// Modified Gram-Schmidt over the columns in order; columns that collapse
/// (rank deficiency) are replaced with basis vectors orthogonal to the rest.
fn orthonormalize_with_completion<T: Scalar>(
    u: &mut Matrix<T>,
    sigma: &[T],
    rank_tol: T,
) -> Result<()> {
    let (m, k) = u.shape();
    let mut kept: Vec<Vec<T>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut col = u.column(j);
        if sigma[j] > rank_tol {
            for prev in &kept {
                let dot: T = prev.iter().zip(&col).map(|(&p, &c)| p * c).sum();
                for (ci, pi) in col.iter_mut().zip(prev) {
                    *ci -= dot * *pi;
                }
            }
            let norm = col.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > lit::<T>(1e-8) {
                for ci in &mut col {
                    *ci /= norm;
                }
                kept.push(col);
                continue;
            }
        }
        kept.push(complete_column(&kept, m)?);
    }
    for (j, col) in kept.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            u.set(r, j, x);
        }
    }
    Ok(())
}

fn complete_column<T: Scalar>(existing: &[Vec<T>], m: usize) -> Result<Vec<T>> {
    for cand in 0..m {
        let mut col = vec![T::zero(); m];
        col[cand] = T::one();
        // Two MGS passes for stability.
        for _ in 0..2 {
            for prev in existing {
                let dot: T = prev.iter().zip(&col).map(|(&p, &c)| p * c).sum();
                for (ci, pi) in col.iter_mut().zip(prev) {
                    *ci -= dot * *pi;
                }
            }
        }
        let norm = col.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > lit::<T>(1e-3) {
            for ci in &mut col {
                *ci /= norm;
            }
            return Ok(col);
        }
    }
    Err(Error::Numeric(
        "could not complete orthonormal basis".into(),
    ))
}

/// First entry with magnitude above 1e-12 (scanning ascending) made positive.
fn fix_signs<T: Scalar>(u: &mut Matrix<T>) {
    let (m, k) = u.shape();
    let tol = lit::<T>(1e-12);
    for j in 0..k {
        for r in 0..m {
            let x = u.get(r, j);
            if x.abs() > tol {
                if x < T::zero() {
                    for i in 0..m {
                        let v = u.get(i, j);
                        u.set(i, j, -v);
                    }
                }
                break;
            }
        }
    }
}
