//! Importance-weighted mean embedding, low-rank transition estimation and
//! the state/action embedding maps built from it.
//!
//! The estimator follows three steps:
//!
//! 1. `F̄ = (1/n) Σ (η(aᵢ)/π̄(aᵢ|sᵢ)) φ(sᵢ) ∘ ψ(aᵢ) ∘ φ(s′ᵢ)` and
//!    `Σ̂ = (1/n) Σ φ(sᵢ) φ(sᵢ)ᵀ`;
//! 2. `F̂` = HOOI approximation of `F̄` at ranks `(r, l, m)`, then
//!    `P̂ = F̂ ×₁ (Σ̂ + εI)⁻¹`;
//! 3. Tucker factors of `P̂` give `f̂(s) = Û₁ᵀφ(s)`, `ĝ(a) = Û₂ᵀψ(a)` and
//!    the joint map `Φ̂(s, a) = Ĉ ×₁ f̂(s)ᵀ ×₂ ĝ(a)ᵀ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decomposition::{self, HooiOptions, TuckerFactors};
use crate::error::{Error, Result};
use crate::features::Features;
use crate::linalg::{self, StridedRef};
use crate::mdp::TransitionDataset;
use crate::tensor::{Matrix, Mode, Tensor3};

const CHUNK: usize = 256;

/// Options for the streaming moment pass.
#[derive(Debug, Clone, Copy)]
pub struct MomentOptions {
    /// Importance weights above this value are clipped.
    pub w_max: f64,
}

impl Default for MomentOptions {
    fn default() -> Self {
        Self { w_max: f64::INFINITY }
    }
}

/// Running sum with Kahan compensation, entrywise.
struct KahanSum {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl KahanSum {
    fn new(n: usize) -> Self {
        Self { sum: vec![0.0; n], comp: vec![0.0; n] }
    }

    fn add(&mut self, x: &[f64]) {
        for ((s, c), &v) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(x) {
            let y = v - *c;
            let t = *s + y;
            *c = (t - *s) - y;
            *s = t;
        }
    }

    fn finish(self, scale: f64) -> Vec<f64> {
        self.sum.into_iter().map(|s| s * scale).collect()
    }
}

/// All sample moments the three estimators need, from one pass over the
/// data.
#[derive(Debug, Clone)]
pub struct SampleMoments {
    pub n: usize,
    /// Importance-weighted mean embedding `F̄`.
    pub f_bar: Tensor3,
    /// `(1/n) Σ φ(sᵢ) φ(sᵢ)ᵀ`.
    pub state_cov: Matrix,
    /// `(1/n) Σ ψ(aᵢ) ψ(aᵢ)ᵀ`.
    pub action_cov: Matrix,
    /// `(1/n) Σ φ(s′ᵢ) φ(s′ᵢ)ᵀ`.
    pub next_cov: Matrix,
    /// Largest importance weight before clipping.
    pub max_weight: f64,
}

fn importance_weights(
    data: &TransitionDataset,
    rows: std::ops::Range<usize>,
    eta: &dyn Fn(&[f64]) -> f64,
    w_max: f64,
    max_weight: &mut f64,
) -> Result<Vec<f64>> {
    rows.map(|i| {
        let pi = data.density(i);
        if !(pi > 0.0) || !pi.is_finite() {
            return Err(Error::NonPositiveDensity { row: i, what: "behavior", value: pi });
        }
        let e = eta(data.action(i));
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::NonPositiveDensity { row: i, what: "target action", value: e });
        }
        let w = e / pi;
        *max_weight = max_weight.max(w);
        Ok(w.min(w_max))
    })
    .collect()
}

fn chunk_features(f: &Features, rows: &[f64]) -> Result<Matrix> {
    f.evaluate_columns(rows)
}

/// Compute [`SampleMoments`] in chunks of rows, compensating the sum
/// across chunks.
pub fn sample_moments(
    data: &TransitionDataset,
    phi: &Features,
    psi: &Features,
    eta: &dyn Fn(&[f64]) -> f64,
    opts: MomentOptions,
) -> Result<SampleMoments> {
    check_feature_inputs(data, phi, psi)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let (ds, da) = (phi.dim(), psi.dim());
    let (sd, ad) = (data.state_dim(), data.action_dim());
    let mut f_acc = KahanSum::new(ds * da * ds);
    let mut s_acc = KahanSum::new(ds * ds);
    let mut a_acc = KahanSum::new(da * da);
    let mut n_acc = KahanSum::new(ds * ds);
    let mut f_chunk = vec![0.0; ds * da * ds];
    let mut max_weight = 0.0f64;
    let n = data.len();
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let c = end - start;
        let w = importance_weights(data, start..end, eta, opts.w_max, &mut max_weight)?;
        let x = chunk_features(phi, &data.states()[start * sd..end * sd])?;
        let y = chunk_features(psi, &data.actions()[start * ad..end * ad])?;
        let z = chunk_features(phi, &data.next_states()[start * sd..end * sd])?;

        // weighted φ(sᵢ) against the Khatri–Rao columns ψ(aᵢ) ⊗ φ(s′ᵢ)
        let mut xw = x.clone();
        for (col, &wi) in w.iter().enumerate() {
            xw.column_mut(col).iter_mut().for_each(|v| *v *= wi);
        }
        let mut kr = vec![0.0; da * ds * c];
        for col in 0..c {
            let yc = y.column(col);
            let zc = z.column(col);
            let dst = &mut kr[col * da * ds..(col + 1) * da * ds];
            for (k, &zk) in zc.iter().enumerate() {
                dst[k * da..(k + 1) * da].iter_mut().zip(yc).for_each(|(d, &yj)| *d = yj * zk);
            }
        }
        linalg::gemm(
            1.0,
            StridedRef::col_major(xw.data(), ds, c),
            StridedRef::col_major(&kr, da * ds, c).transposed(),
            0.0,
            &mut f_chunk,
        );
        f_acc.add(&f_chunk);
        s_acc.add(x.gram_rows().data());
        a_acc.add(y.gram_rows().data());
        n_acc.add(z.gram_rows().data());
    }
    let inv = 1.0 / n as f64;
    let sym = |acc: KahanSum, d: usize| {
        let mut m = Matrix::new(d, d, acc.finish(inv)).expect("square accumulator");
        m.symmetrize();
        m
    };
    Ok(SampleMoments {
        n,
        f_bar: Tensor3::new([ds, da, ds], f_acc.finish(inv))?,
        state_cov: sym(s_acc, ds),
        action_cov: sym(a_acc, da),
        next_cov: sym(n_acc, ds),
        max_weight,
    })
}

fn check_feature_inputs(data: &TransitionDataset, phi: &Features, psi: &Features) -> Result<()> {
    if phi.input_dim() != data.state_dim() || psi.input_dim() != data.action_dim() {
        return Err(Error::DimensionMismatch(format!(
            "features take ({}, {})-dimensional inputs, dataset has ({}, {})",
            phi.input_dim(),
            psi.input_dim(),
            data.state_dim(),
            data.action_dim()
        )));
    }
    Ok(())
}

/// Importance-weighted mean embedding `F̄`.
pub fn mean_embedding(
    data: &TransitionDataset,
    phi: &Features,
    psi: &Features,
    eta: &dyn Fn(&[f64]) -> f64,
) -> Result<Tensor3> {
    Ok(sample_moments(data, phi, psi, eta, MomentOptions::default())?.f_bar)
}

/// State covariance `Σ̂ = (1/n) Σ φ(sᵢ) φ(sᵢ)ᵀ`.
pub fn covariance(data: &TransitionDataset, phi: &Features) -> Result<Matrix> {
    if phi.input_dim() != data.state_dim() {
        return Err(Error::DimensionMismatch("state feature input dimension".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let d = phi.dim();
    let sd = data.state_dim();
    let mut acc = KahanSum::new(d * d);
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        acc.add(chunk_features(phi, &data.states()[start * sd..end * sd])?.gram_rows().data());
    }
    let mut m = Matrix::new(d, d, acc.finish(1.0 / data.len() as f64))?;
    m.symmetrize();
    Ok(m)
}

/// Settings for [`estimate_transition`].
#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    /// Ridge `ε = ridge_scale · trace(Σ̂) / d_S`.
    pub ridge_scale: f64,
    /// Reject `Σ̂ + εI` when its condition number exceeds this.
    pub max_condition: f64,
    pub hooi: HooiOptions,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { ridge_scale: 1e-8, max_condition: 1e14, hooi: HooiOptions::default() }
    }
}

/// `(Σ̂ + εI)⁻¹`, the ridge `ε` and the condition number of `Σ̂ + εI`.
pub fn regularized_inverse(sigma: &Matrix, ridge_scale: f64, max_condition: f64) -> Result<(Matrix, f64, f64)> {
    if sigma.rows() != sigma.cols() {
        return Err(Error::DimensionMismatch("covariance must be square".into()));
    }
    let ridge = ridge_scale * sigma.trace() / sigma.rows() as f64;
    let (inv, cond) = linalg::spd_inverse(sigma, ridge, max_condition)?;
    Ok((inv, ridge, cond))
}

/// Fitted transition model with its embedding maps.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub factors: TuckerFactors,
    pub p_hat: Tensor3,
    pub sigma_hat: Matrix,
    pub sigma_ridge: f64,
    pub condition: f64,
    pub phi: Features,
    pub psi: Features,
    pub ranks: [usize; 3],
    pub hooi_rounds: usize,
}

/// Low-rank estimate of the transition tensor from `F̄` and `Σ̂`.
pub fn estimate_transition(
    f_bar: &Tensor3,
    sigma_hat: &Matrix,
    phi: &Features,
    psi: &Features,
    ranks: [usize; 3],
    opts: EstimateOptions,
) -> Result<EmbeddingModel> {
    let [d1, d2, d3] = f_bar.dims();
    if d1 != d3 || sigma_hat.rows() != d1 || phi.dim() != d1 || psi.dim() != d2 {
        return Err(Error::DimensionMismatch(format!(
            "F̄ has dims {:?}, Σ̂ is {}x{}, features have dims ({}, {})",
            f_bar.dims(),
            sigma_hat.rows(),
            sigma_hat.cols(),
            phi.dim(),
            psi.dim()
        )));
    }
    let hooi = decomposition::hooi_with_options(f_bar, ranks, opts.hooi)?;
    let f_hat = hooi.factors.reconstruct();
    let (inv, ridge, condition) = regularized_inverse(sigma_hat, opts.ridge_scale, opts.max_condition)?;
    let p_hat = f_hat.mode_product(&inv, Mode::One)?;
    let factors = decomposition::extract_factors(&p_hat, ranks)?;
    Ok(EmbeddingModel {
        factors,
        p_hat,
        sigma_hat: sigma_hat.clone(),
        sigma_ridge: ridge,
        condition,
        phi: phi.clone(),
        psi: psi.clone(),
        ranks,
        hooi_rounds: hooi.rounds,
    })
}

impl EmbeddingModel {
    /// `Ê[φ(s′)|s,a] = P̂ ×₁ φ(s)ᵀ ×₂ ψ(a)ᵀ`.
    pub fn predict_next_features(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.predict_from_features(&self.phi.evaluate(s)?, &self.psi.evaluate(a)?)
    }

    pub fn predict_from_features(&self, phi_s: &[f64], psi_a: &[f64]) -> Result<Vec<f64>> {
        self.p_hat.contract_first_two(phi_s, psi_a)
    }

    /// `f̂(s) = Û₁ᵀ φ(s)`.
    pub fn state_embedding(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.factors.u1.tr_matvec(&self.phi.evaluate(s)?)
    }

    /// `ĝ(a) = Û₂ᵀ ψ(a)`.
    pub fn action_embedding(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.factors.u2.tr_matvec(&self.psi.evaluate(a)?)
    }

    /// `Ĉ ×₁ fᵀ ×₂ gᵀ` for given state and action embeddings.
    pub fn joint_from_embeddings(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.factors.core.contract_first_two(f, g)
    }

    /// `Φ̂(s, a)`.
    pub fn joint_embedding(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.joint_from_embeddings(&self.state_embedding(s)?, &self.action_embedding(a)?)
    }

    /// `f̂(s)`, `ĝ(a)` or `Φ̂(s, a)` depending on which inputs are given.
    pub fn embed(&self, s: Option<&[f64]>, a: Option<&[f64]>) -> Result<Vec<f64>> {
        match (s, a) {
            (Some(s), Some(a)) => self.joint_embedding(s, a),
            (Some(s), None) => self.state_embedding(s),
            (None, Some(a)) => self.action_embedding(a),
            (None, None) => Err(Error::InvalidInput("embed needs a state, an action, or both".into())),
        }
    }

    /// `‖Φ̂(s, a) − Φ̂(s′, a′)‖`.
    pub fn diffusion_distance(&self, x: (&[f64], &[f64]), y: (&[f64], &[f64])) -> Result<f64> {
        let p = self.joint_embedding(x.0, x.1)?;
        let q = self.joint_embedding(y.0, y.1)?;
        Ok(p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}

/// Plug-in estimates of the problem constants that enter the error
/// bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    /// `max(‖φ(s)‖², ‖ψ(a)‖²)` over the data.
    pub k_max: f64,
    /// `max η(a)/π̄(a|s)` over the data.
    pub kappa: f64,
    /// `‖(1/n) Σ ‖φ(sᵢ)‖² φ(sᵢ)φ(sᵢ)ᵀ‖₂`.
    pub mu_bar: f64,
    /// `sup (1/n) Σ wᵢ (uᵀφ(sᵢ))² (vᵀψ(aᵢ))² (wᵀφ(s′ᵢ))²` over unit vectors,
    /// by alternating maximization.
    pub lambda_bar: f64,
    /// `max σ_m(P̂ ×₁ wᵀ)` over random unit `w`.
    pub sigma_m_sup: f64,
}

/// Settings for [`diagnostics`].
#[derive(Debug, Clone, Copy)]
pub struct DiagnosticsOptions {
    pub directions: usize,
    pub restarts: usize,
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self { directions: 256, restarts: 8, sweeps: 50, seed: 0 }
    }
}

struct FeatureRows {
    x: Matrix,
    y: Matrix,
    z: Matrix,
    w: Vec<f64>,
}

fn lambda_bar(rows: &FeatureRows, opts: DiagnosticsOptions) -> Result<f64> {
    let n = rows.w.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let unit = |d: usize, rng: &mut ChaCha8Rng| {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let nv = linalg::norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        v
    };
    // weighted second-moment matrix of one mode given per-row coefficients
    let moment = |m: &Matrix, c: &[f64]| {
        let mut scaled = m.clone();
        for (col, &ci) in c.iter().enumerate() {
            let s = ci.sqrt();
            scaled.column_mut(col).iter_mut().for_each(|v| *v *= s);
        }
        scaled.gram_rows().scaled(1.0 / n as f64)
    };
    let project =
        |m: &Matrix, v: &[f64]| -> Result<Vec<f64>> { Ok(m.tr_matvec(v)?.into_iter().map(|p| p * p).collect()) };

    let mut starts: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    // start from the heaviest row of the data
    let heaviest = (0..n)
        .max_by(|&i, &j| {
            let score =
                |k: usize| rows.w[k] * linalg::norm(rows.y.column(k)).powi(2) * linalg::norm(rows.z.column(k)).powi(2);
            score(i).total_cmp(&score(j))
        })
        .unwrap_or(0);
    let normalized = |v: &[f64]| {
        let nv = linalg::norm(v);
        if nv > 0.0 {
            v.iter().map(|x| x / nv).collect()
        } else {
            vec![1.0 / (v.len() as f64).sqrt(); v.len()]
        }
    };
    starts.push((normalized(rows.y.column(heaviest)), normalized(rows.z.column(heaviest))));
    for _ in 0..opts.restarts {
        starts.push((unit(rows.y.rows(), &mut rng), unit(rows.z.rows(), &mut rng)));
    }

    let mut best = 0.0f64;
    for (mut v, mut wv) in starts {
        let mut value = 0.0;
        for _ in 0..opts.sweeps {
            let pv = project(&rows.y, &v)?;
            let pw = project(&rows.z, &wv)?;
            let c: Vec<f64> = (0..n).map(|i| rows.w[i] * pv[i] * pw[i]).collect();
            let eu = linalg::sym_eigen(&moment(&rows.x, &c))?;
            let u = eu.vectors.column(0).to_vec();

            let pu = project(&rows.x, &u)?;
            let c: Vec<f64> = (0..n).map(|i| rows.w[i] * pu[i] * pw[i]).collect();
            let ev = linalg::sym_eigen(&moment(&rows.y, &c))?;
            v = ev.vectors.column(0).to_vec();

            let pv = project(&rows.y, &v)?;
            let c: Vec<f64> = (0..n).map(|i| rows.w[i] * pu[i] * pv[i]).collect();
            let ew = linalg::sym_eigen(&moment(&rows.z, &c))?;
            wv = ew.vectors.column(0).to_vec();
            let next = ew.values[0];
            let done = next - value <= 1e-12 * next.abs();
            value = next;
            if done {
                break;
            }
        }
        best = best.max(value);
    }
    Ok(best)
}

/// Plug-in diagnostics over a dataset and a fitted model.
pub fn diagnostics(
    data: &TransitionDataset,
    phi: &Features,
    psi: &Features,
    eta: &dyn Fn(&[f64]) -> f64,
    model: &EmbeddingModel,
    opts: DiagnosticsOptions,
) -> Result<Diagnostics> {
    check_feature_inputs(data, phi, psi)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let mut max_weight = 0.0;
    let w = importance_weights(data, 0..data.len(), eta, f64::INFINITY, &mut max_weight)?;
    let rows = FeatureRows {
        x: phi.evaluate_columns(data.states())?,
        y: psi.evaluate_columns(data.actions())?,
        z: phi.evaluate_columns(data.next_states())?,
        w,
    };
    let n = data.len();
    let mut k_max = 0.0f64;
    let mut scaled = rows.x.clone();
    for i in 0..n {
        let kx = linalg::norm(rows.x.column(i)).powi(2);
        let ky = linalg::norm(rows.y.column(i)).powi(2);
        k_max = k_max.max(kx).max(ky);
        let s = kx.sqrt();
        scaled.column_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    let mu = scaled.gram_rows().scaled(1.0 / n as f64);
    let mu_bar = linalg::sym_eigen(&mu)?.values[0].max(0.0);
    let lambda_bar = lambda_bar(&rows, opts)?;

    let m = model.ranks[2];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sigma_m_sup = 0.0f64;
    let d1 = model.p_hat.dims()[0];
    for _ in 0..opts.directions {
        let mut u: Vec<f64> = (0..d1).map(|_| StandardNormal.sample(&mut rng)).collect();
        let nu = linalg::norm(&u);
        u.iter_mut().for_each(|x| *x /= nu);
        let slice = model.p_hat.contract_first(&u)?;
        let sv = linalg::singular_values(&slice)?;
        sigma_m_sup = sigma_m_sup.max(sv.get(m - 1).copied().unwrap_or(0.0));
    }
    Ok(Diagnostics { k_max, kappa: max_weight, mu_bar, lambda_bar, sigma_m_sup })
}
