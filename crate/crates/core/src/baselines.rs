//! The two comparison estimators: the untruncated ("vanilla") estimate and
//! the per-mode principal-subspace ("top-r") estimate.

use crate::embedding::{regularized_inverse, sample_moments, MomentOptions, SampleMoments};
use crate::error::{Error, Result};
use crate::features::Features;
use crate::linalg;
use crate::mdp::TransitionDataset;
use crate::tensor::{Matrix, Mode, Tensor3};

/// `P̂ = F̄ ×₁ (Σ̂ + εI)⁻¹` with `ε = ridge_scale · trace(Σ̂)/d_S`.
pub fn vanilla_estimate(f_bar: &Tensor3, sigma_hat: &Matrix, ridge_scale: f64, max_condition: f64) -> Result<Tensor3> {
    if sigma_hat.rows() != f_bar.dims()[0] {
        return Err(Error::DimensionMismatch(format!(
            "Σ̂ is {}x{} but F̄ has mode-1 dimension {}",
            sigma_hat.rows(),
            sigma_hat.cols(),
            f_bar.dims()[0]
        )));
    }
    let (inv, _, _) = regularized_inverse(sigma_hat, ridge_scale, max_condition)?;
    f_bar.mode_product(&inv, Mode::One)
}

/// Leading `r` eigenvectors of a symmetric matrix.
fn principal_directions(cov: &Matrix, r: usize, mode: usize) -> Result<Matrix> {
    if r == 0 || r > cov.rows() {
        return Err(Error::RankOutOfRange { mode, rank: r, max: cov.rows() });
    }
    Ok(linalg::sym_eigen(cov)?.vectors.leading_columns(r))
}

/// Top-r estimate from precomputed moments.
///
/// Each mode's features are projected onto the leading eigenvectors `V_k`
/// of that mode's uncentered sample second moment; the vanilla estimate is
/// formed in the projected coordinates and lifted back with
/// `×₁ V₁ ×₂ V₂ ×₃ V₃`.
pub fn topr_from_moments(
    m: &SampleMoments,
    ranks: [usize; 3],
    ridge_scale: f64,
    max_condition: f64,
) -> Result<Tensor3> {
    let v1 = principal_directions(&m.state_cov, ranks[0], 1)?;
    let v2 = principal_directions(&m.action_cov, ranks[1], 2)?;
    let v3 = principal_directions(&m.next_cov, ranks[2], 3)?;
    // projection is linear, so the projected moments are the projected F̄, Σ̂
    let f_proj = m
        .f_bar
        .mode_product(&v1.transpose(), Mode::One)?
        .mode_product(&v2.transpose(), Mode::Two)?
        .mode_product(&v3.transpose(), Mode::Three)?;
    let mut sigma_proj = v1.transpose_matmul(&m.state_cov.matmul(&v1)?)?;
    sigma_proj.symmetrize();
    let p_proj = vanilla_estimate(&f_proj, &sigma_proj, ridge_scale, max_condition)?;
    p_proj.mode_product(&v1, Mode::One)?.mode_product(&v2, Mode::Two)?.mode_product(&v3, Mode::Three)
}

/// Top-r estimate straight from data.
pub fn topr_estimate(
    data: &TransitionDataset,
    phi: &Features,
    psi: &Features,
    eta: &dyn Fn(&[f64]) -> f64,
    ranks: [usize; 3],
    ridge_scale: f64,
    max_condition: f64,
) -> Result<Tensor3> {
    let m = sample_moments(data, phi, psi, eta, MomentOptions::default())?;
    topr_from_moments(&m, ranks, ridge_scale, max_condition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::hosvd;
    use crate::embedding::{estimate_transition, EstimateOptions};
    use crate::features::{make_rff, FeatureMap, OneHot};
    use crate::mdp::{exact_ground_truth, make_block_mdp, sample_trajectory};
    use crate::measure::{BehaviorPolicy, Measure};

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    #[test]
    fn exact_inputs_recover_p() {
        let mdp = make_block_mdp(7, 4, 2, 2, 0.5, 2).unwrap();
        let psi = Features::OneHot(OneHot::orthonormal_under(&uniform(4)).unwrap());
        let phi = Features::OneHot(OneHot::new(7));
        let xi = [0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1];
        let gt = exact_ground_truth(&mdp, &phi, &psi, &xi, &uniform(4)).unwrap();
        let p = vanilla_estimate(&gt.f, &gt.sigma, 0.0, 1e14).unwrap();
        assert!(p.sub(&gt.p).unwrap().frobenius() <= 1e-8);
        let id = vanilla_estimate(&gt.f, &Matrix::identity(7), 0.0, 1e14).unwrap();
        assert_eq!(id, gt.f);
    }

    #[test]
    fn vanilla_equals_full_rank_tensor_estimate() {
        let mdp = make_block_mdp(6, 3, 2, 3, 0.5, 4).unwrap();
        let data = sample_trajectory(&mdp, &BehaviorPolicy::Fixed(Measure::uniform_categorical(3)), 3000, 1).unwrap();
        let phi = Features::OneHot(OneHot::new(6));
        let psi = Features::OneHot(OneHot::new(3));
        let m = sample_moments(&data, &phi, &psi, &|_| 1.0 / 3.0, MomentOptions::default()).unwrap();
        let v = vanilla_estimate(&m.f_bar, &m.state_cov, 1e-8, 1e14).unwrap();
        let t = estimate_transition(&m.f_bar, &m.state_cov, &phi, &psi, [6, 3, 6], EstimateOptions::default()).unwrap();
        assert!(t.p_hat.sub(&v).unwrap().frobenius() <= 1e-12 * v.frobenius().max(1.0));
        let top = topr_from_moments(&m, [6, 3, 6], 1e-8, 1e14).unwrap();
        assert!(top.sub(&v).unwrap().frobenius() <= 1e-10 * v.frobenius().max(1.0));
    }

    #[test]
    fn lossless_projection_for_low_rank_features() {
        // three frequency clones: the state features span only two directions
        let freq = Matrix::from_rows(&[vec![1.3], vec![0.4], vec![1.3]]).unwrap();
        let fm = FeatureMap::from_parts(freq, vec![0.2, 1.1, 0.2], 0.8, 1.0).unwrap();
        let phi = Features::Fourier(fm);
        let psi = Features::Fourier(make_rff(1, 3, 1.0, 9).unwrap());
        let mdp = make_block_mdp(5, 4, 2, 2, 0.5, 6).unwrap();
        let data = sample_trajectory(&mdp, &BehaviorPolicy::Fixed(Measure::uniform_categorical(4)), 2000, 2).unwrap();
        let m = sample_moments(&data, &phi, &psi, &|_| 0.25, MomentOptions::default()).unwrap();
        assert_eq!(linalg::numerical_rank(&m.state_cov, 1e-12).unwrap(), 2);
        let top = topr_from_moments(&m, [2, 3, 2], 0.0, 1e14).unwrap();
        // Σ̂ is singular here, so compare against the pseudo-inverse form
        let pinv = linalg::pinv(&m.state_cov, 1e-10).unwrap();
        let vanilla = m.f_bar.mode_product(&pinv, Mode::One).unwrap();
        assert!(top.sub(&vanilla).unwrap().frobenius() <= 1e-8 * vanilla.frobenius().max(1.0));
    }

    #[test]
    fn topr_tucker_rank_and_errors() {
        let mdp = make_block_mdp(6, 4, 2, 2, 0.5, 8).unwrap();
        let data = sample_trajectory(&mdp, &BehaviorPolicy::Fixed(Measure::uniform_categorical(4)), 2000, 3).unwrap();
        let phi = Features::OneHot(OneHot::new(6));
        let psi = Features::OneHot(OneHot::new(4));
        let top = topr_estimate(&data, &phi, &psi, &|_| 0.25, [2, 2, 3], 1e-8, 1e14).unwrap();
        for (mode, r) in [(Mode::One, 2), (Mode::Two, 2), (Mode::Three, 3)] {
            assert!(linalg::numerical_rank(&top.matricize(mode), 1e-9).unwrap() <= r);
        }
        assert!(hosvd(&top, [2, 2, 3]).is_ok());
        assert!(matches!(
            topr_estimate(&data, &phi, &psi, &|_| 0.25, [7, 2, 3], 1e-8, 1e14),
            Err(Error::RankOutOfRange { mode: 1, .. })
        ));
        let again = topr_estimate(&data, &phi, &psi, &|_| 0.25, [2, 2, 3], 1e-8, 1e14).unwrap();
        assert_eq!(top, again);
    }
}
