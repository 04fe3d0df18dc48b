//! Truncated SVD and Tucker decompositions of order-3 tensors.
//!
//! All three Tucker routines here share the same sequential projection:
//! the mode-1 factor comes from `M₁(T)`, the mode-2 factor from
//! `M₂(T ×₁ U₁ᵀ)`, and the mode-3 factor from `M₃(T ×₁ U₁ᵀ ×₂ U₂ᵀ)`.
//! [`hooi`] then refines the factors by alternating per-mode updates.

use crate::error::{Error, Result};
use crate::linalg::{self, orthonormalize_columns};
use crate::tensor::{Matrix, Mode, Tensor3};

/// Leading part of a singular value decomposition.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl TruncatedSvd {
    /// `U diag(s) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, &s) in self.s.iter().enumerate() {
            us.column_mut(j).iter_mut().for_each(|x| *x *= s);
        }
        us.matmul_transpose_right(&self.v)
    }
}

/// Leading `r` singular triplets of `m`.
pub fn svd_top(m: &Matrix, r: usize) -> Result<TruncatedSvd> {
    let max = m.rows().min(m.cols());
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { mode: 1, rank: r, max });
    }
    let full = linalg::jacobi_svd(m)?;
    Ok(TruncatedSvd { u: full.u.leading_columns(r), s: full.s[..r].to_vec(), v: full.v.leading_columns(r) })
}

/// `r` leading left singular vectors, completed to an orthonormal set when
/// `r` exceeds the number of columns.
fn leading_left_vectors(m: &Matrix, r: usize) -> Result<Matrix> {
    let k = m.rows().min(m.cols());
    if r <= k {
        return Ok(svd_top(m, r)?.u);
    }
    let full = linalg::jacobi_svd(m)?;
    let mut u = Matrix::zeros(m.rows(), r);
    for j in 0..k {
        u.column_mut(j).copy_from_slice(full.u.column(j));
    }
    orthonormalize_columns(&mut u);
    Ok(u)
}

/// Tucker format `core ×₁ u1 ×₂ u2 ×₃ u3` with column-orthonormal factors.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors {
    pub core: Tensor3,
    pub u1: Matrix,
    pub u2: Matrix,
    pub u3: Matrix,
}

impl TuckerFactors {
    pub fn ranks(&self) -> [usize; 3] {
        self.core.dims()
    }

    /// Dimensions of the reconstructed tensor.
    pub fn ambient_dims(&self) -> [usize; 3] {
        [self.u1.rows(), self.u2.rows(), self.u3.rows()]
    }

    pub fn factor(&self, mode: Mode) -> &Matrix {
        match mode {
            Mode::One => &self.u1,
            Mode::Two => &self.u2,
            Mode::Three => &self.u3,
        }
    }

    pub fn reconstruct(&self) -> Tensor3 {
        reconstruct(self)
    }

    /// Largest `‖UᵀU − I‖_F` over the three factors.
    pub fn orthonormality_defect(&self) -> f64 {
        Mode::ALL.iter().map(|&m| self.factor(m).orthonormality_defect()).fold(0.0, f64::max)
    }
}

/// `core ×₁ u1 ×₂ u2 ×₃ u3`.
pub fn reconstruct(f: &TuckerFactors) -> Tensor3 {
    f.core
        .mode_product(&f.u1, Mode::One)
        .and_then(|t| t.mode_product(&f.u2, Mode::Two))
        .and_then(|t| t.mode_product(&f.u3, Mode::Three))
        .expect("factor shapes are consistent with the core by construction")
}

fn check_ranks(dims: [usize; 3], ranks: [usize; 3]) -> Result<()> {
    for n in 0..3 {
        if ranks[n] == 0 || ranks[n] > dims[n] {
            return Err(Error::RankOutOfRange { mode: n + 1, rank: ranks[n], max: dims[n] });
        }
    }
    Ok(())
}

fn project(t: &Tensor3, u: &Matrix, mode: Mode) -> Tensor3 {
    t.mode_product(&u.transpose(), mode).expect("factor rows match tensor dims")
}

/// `‖T ×₁ U₁ᵀ ×₂ U₂ᵀ ×₃ U₃ᵀ‖_F`, which equals `‖T ×₁ U₁U₁ᵀ ×₂ U₂U₂ᵀ ×₃ U₃U₃ᵀ‖_F`.
pub fn projection_fit(t: &Tensor3, u1: &Matrix, u2: &Matrix, u3: &Matrix) -> f64 {
    project(&project(&project(t, u1, Mode::One), u2, Mode::Two), u3, Mode::Three).frobenius()
}

/// Sequential truncated HOSVD.
fn sequential_hosvd(t: &Tensor3, ranks: [usize; 3]) -> Result<TuckerFactors> {
    check_ranks(t.dims(), ranks)?;
    let u1 = leading_left_vectors(&t.matricize(Mode::One), ranks[0])?;
    let p2 = project(t, &u1, Mode::One);
    let u2 = leading_left_vectors(&p2.matricize(Mode::Two), ranks[1])?;
    let p3 = project(&p2, &u2, Mode::Two);
    let u3 = leading_left_vectors(&p3.matricize(Mode::Three), ranks[2])?;
    let core = project(&p3, &u3, Mode::Three);
    Ok(TuckerFactors { core, u1, u2, u3 })
}

/// Truncated HOSVD with sequential projection between modes; this is the
/// initialization used by [`hooi`].
pub fn hosvd(t: &Tensor3, ranks: [usize; 3]) -> Result<TuckerFactors> {
    sequential_hosvd(t, ranks)
}

/// Settings for [`hooi_with_options`].
#[derive(Debug, Clone, Copy)]
pub struct HooiOptions {
    pub max_iters: usize,
    /// Stop once a full round improves the fit by less than `tol · fit`.
    pub tol: f64,
}

impl Default for HooiOptions {
    fn default() -> Self {
        Self { max_iters: 20, tol: 1e-12 }
    }
}

/// HOOI result with the fit after initialization and after every half-step.
#[derive(Debug, Clone)]
pub struct HooiOutput {
    pub factors: TuckerFactors,
    /// `fit_trace[0]` is the HOSVD fit; then three entries per round.
    pub fit_trace: Vec<f64>,
    pub rounds: usize,
}

/// Higher-order orthogonal iteration with `t_max` rounds and no early stop.
pub fn hooi(t: &Tensor3, ranks: [usize; 3], t_max: usize) -> Result<TuckerFactors> {
    Ok(hooi_with_options(t, ranks, HooiOptions { max_iters: t_max, tol: 0.0 })?.factors)
}

/// Higher-order orthogonal iteration.
///
/// Each round replaces `U₁` by the leading left singular vectors of
/// `M₁(T ×₂ U₂ᵀ ×₃ U₃ᵀ)`, then `U₂` from `M₂(T ×₁ U₁ᵀ ×₃ U₃ᵀ)`, then `U₃`
/// from `M₃(T ×₁ U₁ᵀ ×₂ U₂ᵀ)`. Every update maximizes the projection fit
/// over one factor, so the fit trace is nondecreasing.
pub fn hooi_with_options(t: &Tensor3, ranks: [usize; 3], opts: HooiOptions) -> Result<HooiOutput> {
    let init = sequential_hosvd(t, ranks)?;
    let mut fit_trace = vec![init.core.frobenius()];
    let TuckerFactors { mut u1, mut u2, mut u3, .. } = init.clone();
    if opts.max_iters == 0 {
        return Ok(HooiOutput { factors: init, fit_trace, rounds: 0 });
    }
    let mut rounds = 0;
    let mut core = init.core;
    for _ in 0..opts.max_iters {
        let before = *fit_trace.last().expect("trace is never empty");

        let y = project(&project(t, &u2, Mode::Two), &u3, Mode::Three);
        u1 = leading_left_vectors(&y.matricize(Mode::One), ranks[0])?;
        fit_trace.push(project(&y, &u1, Mode::One).frobenius());

        let y = project(&project(t, &u1, Mode::One), &u3, Mode::Three);
        u2 = leading_left_vectors(&y.matricize(Mode::Two), ranks[1])?;
        fit_trace.push(project(&y, &u2, Mode::Two).frobenius());

        let y = project(&project(t, &u1, Mode::One), &u2, Mode::Two);
        u3 = leading_left_vectors(&y.matricize(Mode::Three), ranks[2])?;
        core = project(&y, &u3, Mode::Three);
        let after = core.frobenius();
        fit_trace.push(after);

        rounds += 1;
        if after - before < opts.tol * after {
            break;
        }
    }
    Ok(HooiOutput { factors: TuckerFactors { core, u1, u2, u3 }, fit_trace, rounds })
}

/// Factor extraction from an estimated transition tensor.
///
/// Starting from `P₁ = P̂`, for `k = 1, 2, 3` take `Û_k` as the leading
/// left singular vectors of `M_k(P_k)` and set `P_{k+1} = P_k ×_k Û_kᵀ`;
/// the core is `P₄`. Keeps `(r, l, m)` singular vectors on the three modes.
pub fn extract_factors(p_hat: &Tensor3, ranks: [usize; 3]) -> Result<TuckerFactors> {
    sequential_hosvd(p_hat, ranks)
}
