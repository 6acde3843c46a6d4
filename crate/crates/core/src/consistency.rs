//! Comparing an estimate with the model that generated the data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::gamma_norms;
use crate::lvmodel::MarginalDecomposition;
use crate::matrix::{self, SymMatrix};
use crate::solver::{sign_pattern, DecompositionEstimate};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub sign_pattern_match: bool,
    pub rank_match: bool,
    /// `S - L` positive definite and `L` positive semidefinite.
    pub realizable: bool,
    pub algebraically_consistent: bool,
    pub g_gamma_error: f64,
    pub covariance_error_spectral: f64,
    /// `KL(fit || truth)`; infinite when the fit is not realizable.
    pub kl_vs_truth: f64,
    pub estimated_rank: usize,
    pub true_rank: usize,
    /// Absolute thresholds used for the sign pattern and the rank.
    pub support_tol: f64,
    pub rank_tol: f64,
}

/// Sign pattern, rank and realizability of `est` against `truth`, with
/// entries of `S` at most `support_tol` and eigenvalues of `L` at most
/// `rank_tol` read as zero. The error fields use `gamma` from the estimate.
pub fn algebraic_consistency(
    est: &DecompositionEstimate,
    truth: &MarginalDecomposition,
    support_tol: f64,
    rank_tol: f64,
) -> Result<ConsistencyVerdict> {
    est.s.check_dim(&truth.s_true)?;
    let sign_pattern_match = sign_pattern(&est.s, support_tol) == sign_pattern(&truth.s_true, 0.0);
    let estimated_rank = est.l.eigenvalues().iter().filter(|&&v| v > rank_tol).count();
    let true_rank = truth.latent_rank();
    let rank_match = estimated_rank == true_rank;
    let k = est.concentration();
    let realizable = k.min_eigenvalue() > 0.0 && est.l.min_eigenvalue() >= -rank_tol;
    let g_gamma_error = parametric_error(est, truth, est.gamma)?;
    let (covariance_error_spectral, kl_vs_truth) = match matrix::inverse(&k) {
        Ok(sigma_hat) => (
            sigma_hat.sub(&truth.sigma_marg).spectral_norm(),
            kl_gaussian(&sigma_hat, &truth.sigma_marg).unwrap_or(f64::INFINITY),
        ),
        Err(_) => (f64::INFINITY, f64::INFINITY),
    };
    Ok(ConsistencyVerdict {
        sign_pattern_match,
        rank_match,
        realizable,
        algebraically_consistent: sign_pattern_match && rank_match && realizable,
        g_gamma_error,
        covariance_error_spectral,
        kl_vs_truth,
        estimated_rank,
        true_rank,
        support_tol,
        rank_tol,
    })
}

/// [`algebraic_consistency`] at the thresholds recorded in the estimate.
pub fn verdict(est: &DecompositionEstimate, truth: &MarginalDecomposition) -> Result<ConsistencyVerdict> {
    algebraic_consistency(est, truth, est.support_threshold, est.rank_threshold)
}

/// `g_gamma(S_hat - S*, L_hat - L*) = max(||dS||_inf / gamma, ||dL||_2)`.
pub fn parametric_error(est: &DecompositionEstimate, truth: &MarginalDecomposition, gamma: f64) -> Result<f64> {
    let (_, g) = gamma_norms(&est.s.sub(&truth.s_true), &est.l.sub(&truth.l_true), gamma)?;
    Ok(g)
}

/// `KL(N(0, a) || N(0, b))`.
pub fn kl_gaussian(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    a.check_dim(b)?;
    let b_inv = matrix::inverse(b)?;
    let ld_a = matrix::logdet(a)?;
    let ld_b = matrix::logdet(b)?;
    let kl = 0.5 * (b_inv.inner(a) - a.dim() as f64 + ld_b - ld_a);
    if kl.is_nan() {
        return Err(Error::invalid("KL divergence is undefined for these inputs"));
    }
    Ok(kl)
}

/// `||(S_hat - L_hat)^{-1} - Sigma*||_2`.
pub fn covariance_error(est: &DecompositionEstimate, truth: &MarginalDecomposition) -> Result<f64> {
    let sigma_hat = matrix::inverse(&est.concentration())?;
    Ok(sigma_hat.sub(&truth.sigma_marg).spectral_norm())
}
