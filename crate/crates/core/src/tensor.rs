//! Dense matrices and order-3 tensors.
//!
//! Both types store their entries contiguously with the first index varying
//! fastest. For [`Tensor3`] entry `(i, j, k)` lives at `i + d₁·(j + d₂·k)`,
//! which makes the mode-1 matricization a reinterpretation of the buffer.
//!
//! Matricization column order: the remaining modes in increasing index
//! order, the first of them varying fastest. So `M₁(T)` has column
//! `j + d₂·k`, `M₂(T)` has column `i + d₁·k` and `M₃(T)` has column
//! `i + d₁·j`. With this choice `matricize(T ×ₖ U, k) = U · matricize(T, k)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, StridedRef};

/// Column-major dense real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i + n * i] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i + n * i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Build from a slice of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(Self::from_fn(n, c, |i, j| rows[i][j]))
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.rows * j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i + self.rows * j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        let r = self.rows;
        &mut self.data[j * r..(j + 1) * r]
    }

    /// Borrow column `p` immutably and column `q` mutably (`p < q`).
    pub(crate) fn two_columns_mut(&mut self, p: usize, q: usize) -> (&[f64], &mut [f64]) {
        assert!(p < q);
        let r = self.rows;
        let (head, tail) = self.data.split_at_mut(q * r);
        (&head[p * r..(p + 1) * r], &mut tail[..r])
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    /// First `n` columns.
    pub fn leading_columns(&self, n: usize) -> Matrix {
        assert!(n <= self.cols);
        Matrix { rows: self.rows, cols: n, data: self.data[..n * self.rows].to_vec() }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub(crate) fn view(&self) -> StridedRef<'_> {
        StridedRef::col_major(&self.data, self.rows, self.cols)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        linalg::gemm(1.0, self.view(), other.view(), 0.0, &mut out.data);
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn transpose_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        linalg::gemm(1.0, self.view().transposed(), other.view(), 0.0, &mut out.data);
        Ok(out)
    }

    /// `self · otherᵀ`. Panics on mismatched column counts.
    pub fn matmul_transpose_right(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_transpose_right column mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        linalg::gemm(1.0, self.view(), other.view().transposed(), 0.0, &mut out.data);
        out
    }

    /// `A Aᵀ`.
    pub fn gram_rows(&self) -> Matrix {
        let mut g = self.matmul_transpose_right(self);
        g.symmetrize();
        g
    }

    /// `Aᵀ A`.
    pub fn gram_cols(&self) -> Matrix {
        let mut g = Matrix::zeros(self.cols, self.cols);
        linalg::gemm(1.0, self.view().transposed(), self.view(), 0.0, &mut g.data);
        g.symmetrize();
        g
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix has {} columns, vector has {} entries",
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            out.iter_mut().zip(self.column(j)).for_each(|(o, a)| *o += a * xj);
        }
        Ok(out)
    }

    /// `Aᵀ x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "matrix has {} rows, vector has {} entries",
                self.rows,
                x.len()
            )));
        }
        Ok((0..self.cols).map(|j| linalg::dot(self.column(j), x)).collect())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| c * x).collect() }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self.data[i + self.rows * i] += v;
        }
    }

    /// Replace `A` by `(A + Aᵀ)/2`. No-op on non-square matrices.
    pub fn symmetrize(&mut self) {
        if self.rows != self.cols {
            return;
        }
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (self.data[i + n * j] + self.data[j + n * i]);
                self.data[i + n * j] = m;
                self.data[j + n * i] = m;
            }
        }
    }

    /// `‖UᵀU − I‖_F`.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut g = self.gram_cols();
        g.add_diagonal(-1.0);
        g.frobenius()
    }

    /// Largest absolute asymmetry `max |Aᵢⱼ − Aⱼᵢ|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// One of the three modes of an order-3 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    One,
    Two,
    Three,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::One, Mode::Two, Mode::Three];

    /// Zero-based axis index.
    pub fn index(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
            Mode::Three => 2,
        }
    }
}

impl TryFrom<usize> for Mode {
    type Error = Error;

    /// One-based mode number, as in `×₁, ×₂, ×₃`.
    fn try_from(n: usize) -> Result<Self> {
        match n {
            1 => Ok(Mode::One),
            2 => Ok(Mode::Two),
            3 => Ok(Mode::Three),
            _ => Err(Error::InvalidInput(format!("mode must be 1, 2 or 3, got {n}"))),
        }
    }
}

/// Dense order-3 real tensor, first index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let len = dims[0] * dims[1] * dims[2];
        if data.len() != len {
            return Err(Error::DimensionMismatch(format!(
                "tensor of dims {dims:?} needs {len} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    /// Rank-one tensor `u ∘ v ∘ w`.
    pub fn outer(u: &[f64], v: &[f64], w: &[f64]) -> Self {
        Self::from_fn([u.len(), v.len(), w.len()], |i, j, k| u[i] * v[j] * w[k])
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mode-`n` product `T ×ₙ M`: `(T ×ₙ M)_{…j…} = Σᵢ T_{…i…} M_{ji}`.
    pub fn mode_product(&self, m: &Matrix, mode: Mode) -> Result<Tensor3> {
        let [d1, d2, d3] = self.dims;
        let n = mode.index();
        if m.cols() != self.dims[n] {
            return Err(Error::DimensionMismatch(format!(
                "mode-{} product needs a matrix with {} columns, got {}x{}",
                n + 1,
                self.dims[n],
                m.rows(),
                m.cols()
            )));
        }
        let q = m.rows();
        let mut dims = self.dims;
        dims[n] = q;
        let mut out = Tensor3::zeros(dims);
        match mode {
            Mode::One => {
                // out (q × d2d3) = M · M₁(T)
                let t = StridedRef::col_major(&self.data, d1, d2 * d3);
                linalg::gemm(1.0, m.view(), t, 0.0, &mut out.data);
            }
            Mode::Two => {
                // per frontal slice k: out_k (d1 × q) = T_k (d1 × d2) · Mᵀ
                for k in 0..d3 {
                    let slice = &self.data[k * d1 * d2..(k + 1) * d1 * d2];
                    let t = StridedRef::col_major(slice, d1, d2);
                    let dst = &mut out.data[k * d1 * q..(k + 1) * d1 * q];
                    linalg::gemm(1.0, t, m.view().transposed(), 0.0, dst);
                }
            }
            Mode::Three => {
                // out ((d1d2) × q) = T ((d1d2) × d3) · Mᵀ
                let t = StridedRef::col_major(&self.data, d1 * d2, d3);
                linalg::gemm(1.0, t, m.view().transposed(), 0.0, &mut out.data);
            }
        }
        Ok(out)
    }

    /// Mode-`k` matricization `M_k(T)`; column order documented at module level.
    pub fn matricize(&self, mode: Mode) -> Matrix {
        let [d1, d2, d3] = self.dims;
        match mode {
            Mode::One => Matrix { rows: d1, cols: d2 * d3, data: self.data.clone() },
            Mode::Two => {
                let mut out = Matrix::zeros(d2, d1 * d3);
                for k in 0..d3 {
                    for j in 0..d2 {
                        for i in 0..d1 {
                            out.data[j + d2 * (i + d1 * k)] = self.data[i + d1 * (j + d2 * k)];
                        }
                    }
                }
                out
            }
            Mode::Three => {
                let mut out = Matrix::zeros(d3, d1 * d2);
                for k in 0..d3 {
                    for c in 0..d1 * d2 {
                        out.data[k + d3 * c] = self.data[c + d1 * d2 * k];
                    }
                }
                out
            }
        }
    }

    /// Inverse of [`Tensor3::matricize`].
    pub fn fold(m: &Matrix, mode: Mode, dims: [usize; 3]) -> Result<Tensor3> {
        let n = mode.index();
        let others: usize = dims.iter().enumerate().filter(|&(i, _)| i != n).map(|(_, d)| d).product();
        if m.rows() != dims[n] || m.cols() != others {
            return Err(Error::DimensionMismatch(format!(
                "cannot fold {}x{} matrix along mode {} into {dims:?}",
                m.rows(),
                m.cols(),
                n + 1
            )));
        }
        let [d1, d2, d3] = dims;
        let out = match mode {
            Mode::One => Tensor3 { dims, data: m.data.clone() },
            Mode::Two => Tensor3::from_fn(dims, |i, j, k| m.data[j + d2 * (i + d1 * k)]),
            Mode::Three => Tensor3::from_fn(dims, |i, j, k| m.data[k + d3 * (i + d1 * j)]),
        };
        Ok(out)
    }

    pub fn inner(&self, other: &Tensor3) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.check_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor3 { dims: self.dims, data })
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.check_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor3 { dims: self.dims, data })
    }

    pub fn scaled(&self, c: f64) -> Tensor3 {
        Tensor3 { dims: self.dims, data: self.data.iter().map(|x| c * x).collect() }
    }

    fn check_same_dims(&self, other: &Tensor3) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!("tensor dims {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    /// `T ×₁ uᵀ`, a `d₂ × d₃` matrix.
    pub fn contract_first(&self, u: &[f64]) -> Result<Matrix> {
        let [d1, d2, d3] = self.dims;
        if u.len() != d1 {
            return Err(Error::DimensionMismatch(format!("mode-1 vector must have {d1} entries, got {}", u.len())));
        }
        let t = StridedRef::col_major(&self.data, d1, d2 * d3);
        let uv = StridedRef::col_major(u, d1, 1);
        let mut out = vec![0.0; d2 * d3];
        // (1 × d2d3) = uᵀ · M₁(T), stored as a d2×d3 column-major matrix
        linalg::gemm(1.0, uv.transposed(), t, 0.0, &mut out);
        Matrix::new(d2, d3, out)
    }

    /// `T ×₁ uᵀ ×₂ vᵀ`, a vector of length `d₃`.
    pub fn contract_first_two(&self, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let m = self.contract_first(u)?;
        m.tr_matvec(v)
    }

    /// `T ×₁ uᵀ ×₃ wᵀ`.
    pub fn contract_first_third(&self, u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let m = self.contract_first(u)?;
        m.matvec(w)
    }

    /// `T ×₂ vᵀ ×₃ wᵀ`.
    pub fn contract_last_two(&self, v: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let [d1, d2, d3] = self.dims;
        if v.len() != d2 || w.len() != d3 {
            return Err(Error::DimensionMismatch(format!(
                "expected vectors of length {d2} and {d3}, got {} and {}",
                v.len(),
                w.len()
            )));
        }
        let mut out = vec![0.0; d1];
        for k in 0..d3 {
            for j in 0..d2 {
                let c = v[j] * w[k];
                if c == 0.0 {
                    continue;
                }
                let col = &self.data[d1 * (j + d2 * k)..d1 * (j + d2 * k + 1)];
                out.iter_mut().zip(col).for_each(|(o, t)| *o += c * t);
            }
        }
        Ok(out)
    }

    /// Multilinear form `⟨T, u ∘ v ∘ w⟩`.
    pub fn multilinear(&self, u: &[f64], v: &[f64], w: &[f64]) -> Result<f64> {
        let x = self.contract_last_two(v, w)?;
        if u.len() != x.len() {
            return Err(Error::DimensionMismatch("mode-1 vector length".into()));
        }
        Ok(linalg::dot(&x, u))
    }

    /// Lower estimate of the tensor spectral norm `sup ⟨T, u₁∘u₂∘u₃⟩` over
    /// unit vectors, by alternating rank-one power iteration from random
    /// starts. Deterministic given `seed`.
    pub fn spectral_norm_approx(&self, opts: SpectralNormOptions) -> f64 {
        let [d1, d2, d3] = self.dims;
        if self.data.iter().all(|&x| x == 0.0) {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut best = 0.0f64;
        for _ in 0..opts.restarts.max(1) {
            let mut v = unit_random(d2, &mut rng);
            let mut w = unit_random(d3, &mut rng);
            let mut u = vec![0.0; d1];
            let mut prev = f64::NEG_INFINITY;
            let mut value = 0.0;
            for _ in 0..opts.iters.max(1) {
                u = self.contract_last_two(&v, &w).expect("dims checked");
                normalize_or_keep(&mut u);
                v = self.contract_first_third(&u, &w).expect("dims checked");
                normalize_or_keep(&mut v);
                w = self.contract_first_two(&u, &v).expect("dims checked");
                value = linalg::norm(&w);
                normalize_or_keep(&mut w);
                if (value - prev).abs() <= opts.tol * value.abs().max(1.0) {
                    break;
                }
                prev = value;
            }
            best = best.max(value.abs());
        }
        best
    }
}

fn unit_random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    normalize_or_keep(&mut v);
    v
}

fn normalize_or_keep(v: &mut [f64]) {
    let n = linalg::norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Settings for [`Tensor3::spectral_norm_approx`].
#[derive(Debug, Clone, Copy)]
pub struct SpectralNormOptions {
    pub restarts: usize,
    pub iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SpectralNormOptions {
    fn default() -> Self {
        Self { restarts: 16, iters: 100, tol: 1e-10, seed: 0 }
    }
}
