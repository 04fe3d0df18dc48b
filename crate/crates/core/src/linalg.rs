//! Dense symmetric eigensolver and the matrix functions built on it.
//!
//! Everything here works on the column-major [`Matrix`] type. The
//! eigensolver is a cyclic Jacobi method: slow for large matrices but
//! accurate to working precision on the few-hundred-dimensional Gram and
//! covariance matrices used by the rest of the crate.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Strided read-only view used to feed the GEMM kernel.
#[derive(Clone, Copy)]
pub(crate) struct StridedRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> StridedRef<'a> {
    pub fn col_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: 1, cs: rows }
    }

    pub fn transposed(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// `c = alpha * a * b + beta * c`, with `c` column-major `a.rows × b.cols`.
pub(crate) fn gemm(alpha: f64, a: StridedRef<'_>, b: StridedRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: bounds of all three operands were checked above against their
    // strides, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues in nonincreasing order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, matching `values`.
    pub vectors: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Only the upper triangle is read after symmetrization `(A + Aᵀ)/2`.
/// Eigenvalues are sorted in nonincreasing order; equal eigenvalues keep the
/// order in which the rotations left them (a stable sort).
pub fn sym_eigen(a: &Matrix) -> Result<SymEigen> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::DimensionMismatch(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if a.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    // Work in row-major n×n buffer; symmetric so layout hardly matters.
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a.get(i, j) + a.get(j, i));
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let total: f64 = m.iter().map(|x| x * x).sum();
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off <= f64::EPSILON * f64::EPSILON * total * 1e-4 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                // Skip rotations that cannot change the diagonal in floating point.
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()).max(f64::MIN_POSITIVE) {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y * n + y].total_cmp(&m[x * n + x]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = Matrix::from_fn(n, n, |row, col| v[row * n + order[col]]);
    Ok(SymEigen { values, vectors })
}

/// Flip the sign of each column so its largest-magnitude entry is positive.
pub fn canonicalize_signs(m: &mut Matrix) {
    for j in 0..m.cols() {
        let col = m.column(j);
        let mut best = 0.0f64;
        for &x in col {
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            m.column_mut(j).iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Thin singular value decomposition `A = U diag(s) Vᵀ`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// `rows × k` with orthonormal columns, `k = min(rows, cols)`.
    pub u: Matrix,
    /// Nonincreasing singular values.
    pub s: Vec<f64>,
    /// `cols × k` with orthonormal columns.
    pub v: Matrix,
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Rotations orthogonalize the rows of `A` when `rows ≤ cols` and the
/// columns otherwise, so the rotated dimension is always the smaller one.
/// Singular values come out accurate to about `ε·σ₁` in absolute terms,
/// including the ones that should be exactly zero. Singular vectors for
/// zero singular values are completed to an orthonormal set. Each left
/// singular vector is signed so its largest-magnitude entry is positive.
pub fn jacobi_svd(a: &Matrix) -> Result<ThinSvd> {
    if a.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let (m, n) = (a.rows(), a.cols());
    if m == 0 || n == 0 {
        return Ok(ThinSvd { u: Matrix::zeros(m, 0), s: Vec::new(), v: Matrix::zeros(n, 0) });
    }
    // Orthogonalize the `k` vectors of length `len` stored contiguously.
    let transpose = m > n;
    let (k, len) = if transpose { (n, m) } else { (m, n) };
    let mut w = vec![0.0; k * len];
    if transpose {
        // vectors are the columns of A
        w.copy_from_slice(a.data());
    } else {
        for i in 0..m {
            for j in 0..n {
                w[i * len + j] = a.get(i, j);
            }
        }
    }
    let mut rot = vec![0.0; k * k]; // column p of rot at rot[p*k..]
    for p in 0..k {
        rot[p * k + p] = 1.0;
    }
    let mut norms: Vec<f64> = (0..k).map(|p| dot(&w[p * len..(p + 1) * len], &w[p * len..(p + 1) * len])).collect();
    let tol = f64::EPSILON;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let (head, tail) = w.split_at_mut(q * len);
                let wp = &mut head[p * len..(p + 1) * len];
                let wq = &mut tail[..len];
                let gamma = dot(wp, wq);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in wp.iter_mut().zip(wq.iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
                norms[p] = dot(wp, wp);
                norms[q] = dot(wq, wq);
                let (rh, rt) = rot.split_at_mut(q * k);
                let rp = &mut rh[p * k..(p + 1) * k];
                let rq = &mut rt[..k];
                for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let sv: Vec<f64> = (0..k).map(|p| norm(&w[p * len..(p + 1) * len])).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| sv[y].total_cmp(&sv[x]));
    let s: Vec<f64> = order.iter().map(|&p| sv[p]).collect();
    // `fixed` is the rotation side (length k), `derived` the normalized vectors (length len).
    let fixed = Matrix::from_fn(k, k, |i, c| rot[order[c] * k + i]);
    let mut derived = Matrix::zeros(len, k);
    for (c, &p) in order.iter().enumerate() {
        let sigma = sv[p];
        if sigma > 0.0 {
            let src = &w[p * len..(p + 1) * len];
            derived.column_mut(c).iter_mut().zip(src).for_each(|(d, x)| *d = x / sigma);
        }
    }
    orthonormalize_columns(&mut derived);
    let (mut u, mut v) = if transpose { (derived, fixed) } else { (fixed, derived) };
    for c in 0..k {
        let col = u.column(c);
        let mut best = 0.0f64;
        for &x in col {
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            u.column_mut(c).iter_mut().for_each(|x| *x = -*x);
            v.column_mut(c).iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(ThinSvd { u, s, v })
}

/// Largest singular value (operator 2-norm) of a matrix.
pub fn operator_norm(m: &Matrix) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

/// Singular values of a matrix, nonincreasing, `min(rows, cols)` of them.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(jacobi_svd(m)?.s)
}

/// Numerical rank: count of singular values above `tol · max(σ₁, 1)`.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    let s = singular_values(m)?;
    let top = s.first().copied().unwrap_or(0.0);
    let cut = tol * top.max(1.0);
    Ok(s.iter().filter(|&&x| x > cut).count())
}

/// Apply `f` to the eigenvalues of a symmetric matrix: `V f(Λ) Vᵀ`.
pub fn sym_apply(eig: &SymEigen, f: impl Fn(f64) -> f64) -> Matrix {
    let n = eig.values.len();
    let mut scaled = eig.vectors.clone();
    for (j, &l) in eig.values.iter().enumerate() {
        let fl = f(l);
        scaled.column_mut(j).iter_mut().for_each(|x| *x *= fl);
    }
    let mut out = scaled.matmul_transpose_right(&eig.vectors);
    out.symmetrize();
    debug_assert_eq!(out.rows(), n);
    out
}

/// Inverse of a symmetric positive definite matrix after adding `ridge · I`.
///
/// Returns the inverse and the condition number of the ridged matrix.
/// Rejects the matrix when its smallest ridged eigenvalue is not positive
/// or the condition number exceeds `max_condition`.
pub fn spd_inverse(a: &Matrix, ridge: f64, max_condition: f64) -> Result<(Matrix, f64)> {
    let mut shifted = a.clone();
    shifted.add_diagonal(ridge);
    let eig = sym_eigen(&shifted)?;
    let top = eig.values.first().copied().unwrap_or(0.0);
    let bottom = eig.values.last().copied().unwrap_or(0.0);
    if !(bottom > 0.0) || !(top > 0.0) {
        return Err(Error::Singular(format!("smallest eigenvalue {bottom:e} after ridge {ridge:e}")));
    }
    let cond = top / bottom;
    if cond > max_condition {
        return Err(Error::Singular(format!(
            "condition number {cond:e} exceeds {max_condition:e} after ridge {ridge:e}"
        )));
    }
    Ok((sym_apply(&eig, |l| 1.0 / l), cond))
}

/// Moore–Penrose pseudo-inverse via the eigendecomposition of `AᵀA`.
///
/// Singular values at or below `rcond · σ₁` are treated as zero.
pub fn pinv(a: &Matrix, rcond: f64) -> Result<Matrix> {
    let gram = a.gram_cols();
    let eig = sym_eigen(&gram)?;
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let cut = (rcond * top.sqrt()).powi(2);
    // (AᵀA)⁺ Aᵀ
    let inv = sym_apply(&eig, |l| if l > cut && l > 0.0 { 1.0 / l } else { 0.0 });
    Ok(inv.matmul_transpose_right(a))
}

/// Orthonormalize the columns of `m` in place with two passes of modified
/// Gram–Schmidt. Columns that collapse numerically are replaced by unit
/// vectors orthogonal to every previous column.
pub fn orthonormalize_columns(m: &mut Matrix) {
    let rows = m.rows();
    let cols = m.cols();
    for j in 0..cols {
        let norm0 = norm(m.column(j));
        for _pass in 0..2 {
            for p in 0..j {
                let d = dot(m.column(p), m.column(j));
                let (prev, cur) = m.two_columns_mut(p, j);
                cur.iter_mut().zip(prev.iter()).for_each(|(c, q)| *c -= d * q);
            }
        }
        let nrm = norm(m.column(j));
        if nrm > 1e-10 * norm0.max(f64::MIN_POSITIVE) && nrm > 1e-300 {
            m.column_mut(j).iter_mut().for_each(|x| *x /= nrm);
            continue;
        }
        // Complete with the first coordinate vector that survives projection.
        let mut placed = false;
        for e in 0..rows {
            let mut cand = vec![0.0; rows];
            cand[e] = 1.0;
            for _pass in 0..2 {
                for p in 0..j {
                    let d = dot(m.column(p), &cand);
                    cand.iter_mut().zip(m.column(p)).for_each(|(c, q)| *c -= d * q);
                }
            }
            let nrm = norm(&cand);
            if nrm > 1e-6 {
                m.column_mut(j).iter_mut().zip(cand).for_each(|(x, c)| *x = c / nrm);
                placed = true;
                break;
            }
        }
        assert!(placed, "cannot complete an orthonormal basis with more columns than rows");
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
