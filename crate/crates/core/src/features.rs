//! Feature maps for states and actions.
//!
//! [`FeatureMap`] holds random Fourier features for the Gaussian kernel,
//! `h_i(x) = scale · cos(ωᵢᵀx + bᵢ)`, optionally followed by a whitening
//! matrix that makes the features orthonormal under a reference measure.
//! [`OneHot`] covers finite spaces, where the indicator basis (possibly
//! rescaled) is exact. [`Features`] is the closed set of maps the rest of
//! the crate accepts.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Matrix;

/// Gaussian kernel `(1/2πσ²) exp(−‖x−y‖²/2σ²)`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", x.len(), y.len())));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let s2 = bandwidth * bandwidth;
    Ok((-d2 / (2.0 * s2)).exp() / (2.0 * PI * s2))
}

/// Kernel diagonal `K(x, x) = 1/(2πσ²)`.
pub fn gaussian_kernel_diagonal(bandwidth: f64) -> f64 {
    1.0 / (2.0 * PI * bandwidth * bandwidth)
}

/// Random Fourier features with an optional whitening transform.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    input_dim: usize,
    /// `n_features × input_dim`.
    frequencies: Matrix,
    offsets: Vec<f64>,
    scale: f64,
    bandwidth: f64,
    whitener: Option<Matrix>,
}

impl FeatureMap {
    /// Assemble a feature map from explicit parameters. `bandwidth` is only
    /// recorded; it does not enter [`FeatureMap::evaluate`].
    pub fn from_parts(frequencies: Matrix, offsets: Vec<f64>, scale: f64, bandwidth: f64) -> Result<Self> {
        if frequencies.rows() != offsets.len() || offsets.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} frequency rows vs {} offsets",
                frequencies.rows(),
                offsets.len()
            )));
        }
        Ok(Self { input_dim: frequencies.cols(), frequencies, offsets, scale, bandwidth, whitener: None })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_features(&self) -> usize {
        self.offsets.len()
    }

    pub fn frequencies(&self) -> &Matrix {
        &self.frequencies
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn whitener(&self) -> Option<&Matrix> {
        self.whitener.as_ref()
    }

    pub fn with_whitener(mut self, whitener: Option<Matrix>) -> Result<Self> {
        if let Some(w) = &whitener {
            if w.rows() != self.n_features() || w.cols() != self.n_features() {
                return Err(Error::DimensionMismatch(format!(
                    "whitener must be {n}x{n}, got {}x{}",
                    w.rows(),
                    w.cols(),
                    n = self.n_features()
                )));
            }
        }
        self.whitener = whitener;
        Ok(self)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "feature map expects {}-dimensional input, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Features before whitening.
    pub fn evaluate_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut out = vec![0.0; self.n_features()];
        self.raw_into(x, &mut out);
        Ok(out)
    }

    fn raw_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.offsets);
        for (d, &xd) in x.iter().enumerate() {
            out.iter_mut().zip(self.frequencies.column(d)).for_each(|(o, w)| *o += w * xd);
        }
        out.iter_mut().for_each(|o| *o = self.scale * o.cos());
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let raw = self.evaluate_raw(x)?;
        match &self.whitener {
            None => Ok(raw),
            Some(w) => w.matvec(&raw),
        }
    }
}

/// Draw random Fourier features for the Gaussian kernel of the given
/// bandwidth: `ω ~ N(0, σ⁻² I)`, `b ~ U[0, 2π)` and
/// `scale = √(2 K(x,x) / n_features)`, so `Σᵢ hᵢ(x) hᵢ(y) ≈ K(x, y)`.
pub fn make_rff(input_dim: usize, n_features: usize, bandwidth: f64, seed: u64) -> Result<FeatureMap> {
    if n_features == 0 || input_dim == 0 {
        return Err(Error::InvalidInput("feature map needs at least one feature and input dimension".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / bandwidth).expect("positive std");
    let uniform = Uniform::new(0.0, 2.0 * PI).expect("valid range");
    let freq: Vec<f64> = (0..n_features * input_dim).map(|_| normal.sample(&mut rng)).collect();
    let frequencies = Matrix::from_fn(n_features, input_dim, |i, d| freq[i * input_dim + d]);
    let offsets: Vec<f64> = (0..n_features).map(|_| uniform.sample(&mut rng)).collect();
    let scale = (2.0 * gaussian_kernel_diagonal(bandwidth) / n_features as f64).sqrt();
    FeatureMap::from_parts(frequencies, offsets, scale, bandwidth)
}

/// Whitening so the features become orthonormal under the empirical
/// measure of `samples`: `W = Ĝ^{-1/2}` with `Ĝ = (1/M) Σ h(x) h(x)ᵀ` over
/// the raw features.
///
/// Eigenvalues of `Ĝ` below `1e-10 · trace(Ĝ)/n_features` are treated as
/// numerically singular and rejected.
pub fn orthogonalize(fm: &FeatureMap, samples: &[Vec<f64>]) -> Result<FeatureMap> {
    let n = fm.n_features();
    if samples.len() < n {
        return Err(Error::InvalidInput(format!(
            "need at least {n} measure samples to whiten {n} features, got {}",
            samples.len()
        )));
    }
    let mut gram = Matrix::zeros(n, n);
    let mut raw = vec![0.0; n];
    // accumulate in blocks to keep the rank-one updates on the GEMM path
    for chunk in samples.chunks(256) {
        let mut b = Matrix::zeros(n, chunk.len());
        for (c, x) in chunk.iter().enumerate() {
            fm.check_input(x)?;
            fm.raw_into(x, &mut raw);
            b.column_mut(c).copy_from_slice(&raw);
        }
        gram = gram.add(&b.gram_rows())?;
    }
    let gram = gram.scaled(1.0 / samples.len() as f64);
    let eig = linalg::sym_eigen(&gram)?;
    let trace: f64 = eig.values.iter().sum();
    let floor = 1e-10 * trace / n as f64;
    let smallest = eig.values.last().copied().unwrap_or(0.0);
    if !(trace > 0.0) || !(smallest > floor) {
        return Err(Error::Singular(format!(
            "feature Gram matrix has smallest eigenvalue {smallest:e}, floor {floor:e} (trace {trace:e}); \
             reduce the feature count or draw more measure samples"
        )));
    }
    let w = linalg::sym_apply(&eig, |l| 1.0 / l.sqrt());
    fm.clone().with_whitener(Some(w))
}

/// Weighted indicator basis on a finite set `{0, …, n−1}`; the input is a
/// one-dimensional vector holding the index.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHot {
    weights: Vec<f64>,
}

impl OneHot {
    pub fn new(n: usize) -> Self {
        Self { weights: vec![1.0; n] }
    }

    pub fn with_weights(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    /// Basis `e_i / √μ(i)`, orthonormal in `L²(μ)`.
    pub fn orthonormal_under(measure: &[f64]) -> Result<Self> {
        if measure.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidInput("measure must be strictly positive".into()));
        }
        Ok(Self { weights: measure.iter().map(|p| 1.0 / p.sqrt()).collect() })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn index_of(&self, x: &[f64]) -> Result<usize> {
        if x.len() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "one-hot input must be a single index, got {} values",
                x.len()
            )));
        }
        let v = x[0];
        let i = v.round();
        if !(i >= 0.0) || (i as usize) >= self.weights.len() || (v - i).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("{v} is not an index below {}", self.weights.len())));
        }
        Ok(i as usize)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let i = self.index_of(x)?;
        let mut out = vec![0.0; self.weights.len()];
        out[i] = self.weights[i];
        Ok(out)
    }
}

/// A state or action feature basis.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Fourier(FeatureMap),
    OneHot(OneHot),
}

impl Features {
    pub fn dim(&self) -> usize {
        match self {
            Features::Fourier(f) => f.n_features(),
            Features::OneHot(h) => h.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Features::Fourier(f) => f.input_dim(),
            Features::OneHot(_) => 1,
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Features::Fourier(f) => f.evaluate(x),
            Features::OneHot(h) => h.evaluate(x),
        }
    }

    /// Evaluate every row of a row-major `n × input_dim` buffer into a
    /// column-major `dim × n` matrix.
    pub fn evaluate_columns(&self, rows: &[f64]) -> Result<Matrix> {
        let d = self.input_dim();
        if d == 0 || !rows.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch("input buffer is not a whole number of rows".into()));
        }
        let n = rows.len() / d;
        let mut out = Matrix::zeros(self.dim(), n);
        for (c, x) in rows.chunks_exact(d).enumerate() {
            let v = self.evaluate(x)?;
            out.column_mut(c).copy_from_slice(&v);
        }
        Ok(out)
    }
}

impl From<FeatureMap> for Features {
    fn from(f: FeatureMap) -> Self {
        Features::Fourier(f)
    }
}

impl From<OneHot> for Features {
    fn from(h: OneHot) -> Self {
        Features::OneHot(h)
    }
}
