//! Regularized maximum likelihood for a sparse-minus-low-rank concentration
//! matrix:
//!
//! ```text
//! minimize  tr((S - L) Sigma_n) - log det(S - L) + lambda (gamma ||S||_1 + tr L)
//! subject to S - L > 0, L >= 0
//! ```
//!
//! Solved by consensus ADMM over `(R, S, L)` with the constraint `R = S - L`;
//! each block has a closed-form proximal step. With scaled dual `U`:
//!
//! * `R <- logdet_prox(S - L - U, 1/rho)`
//! * `S <- soft_threshold(R + L + U, lambda gamma / rho)`
//! * `L <- psd_trace_prox(S - R - U, lambda / rho)`
//! * `U <- U + R - S + L`
//!
//! Residuals are relative: primal `||R - S + L|| / max(1, ||R||, ||S - L||)`,
//! dual `rho ||(dS, dL)|| / max(1, ||rho U||)` (Frobenius norms). A fit is
//! declared converged once both fall below tolerance *and* the optimality
//! residual from [`kkt_residual`] is within ten times the larger tolerance.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_tangent_unchecked, RankTangentSpace};
use crate::lvmodel::SampleCovariance;
use crate::matrix::{self, sym_eig_unchecked, SymMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Initial ADMM penalty.
    pub rho_admm: f64,
    /// Residual balancing of the penalty during the first iterations.
    pub adaptive_rho: bool,
    pub max_iters: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    /// Entries with `|S_ij| <= support_tol * max|S|` read as zero.
    pub support_tol: f64,
    /// Eigenvalues of `L` at most `rank_tol * ||L||_2` read as zero.
    pub rank_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            gamma: 0.1,
            rho_admm: 1.0,
            adaptive_rho: true,
            max_iters: 20_000,
            tol_primal: 1e-6,
            tol_dual: 1e-6,
            support_tol: 1e-4,
            rank_tol: 1e-4,
        }
    }
}

impl SolverConfig {
    pub fn new(lambda: f64, gamma: f64) -> Self {
        Self {
            lambda,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("rho_admm", self.rho_admm),
            ("tol_primal", self.tol_primal),
            ("tol_dual", self.tol_dual),
            ("support_tol", self.support_tol),
            ("rank_tol", self.rank_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        Ok(())
    }

    fn kkt_tol(&self) -> f64 {
        10.0 * self.tol_primal.max(self.tol_dual)
    }
}

/// ADMM iterate, kept so that neighbouring problems can warm start.
#[derive(Clone, Debug)]
pub struct AdmmState {
    s: SymMatrix,
    l: SymMatrix,
    u: SymMatrix,
    rho: f64,
}

impl AdmmState {
    fn cold(sigma_n: &SymMatrix, lambda_gamma: f64, rho: f64) -> Self {
        let p = sigma_n.dim();
        let d: Vec<f64> = (0..p).map(|i| 1.0 / (sigma_n.get(i, i) + lambda_gamma)).collect();
        let s = SymMatrix::from_diagonal(&d);
        Self {
            s,
            l: SymMatrix::zeros(p),
            u: SymMatrix::zeros(p),
            rho,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecompositionEstimate {
    pub s: SymMatrix,
    pub l: SymMatrix,
    pub objective: f64,
    pub iters: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    pub lambda: f64,
    pub gamma: f64,
    /// Absolute entry threshold used to read the sign pattern.
    pub support_threshold: f64,
    /// Absolute eigenvalue threshold used to read the rank.
    pub rank_threshold: f64,
    #[serde(skip)]
    state: Option<AdmmState>,
}

impl DecompositionEstimate {
    pub fn p(&self) -> usize {
        self.s.dim()
    }

    /// Marginal concentration `S - L`.
    pub fn concentration(&self) -> SymMatrix {
        self.s.sub(&self.l)
    }

    /// Row-major signs of `S` after thresholding.
    pub fn sign_pattern(&self) -> Vec<i8> {
        sign_pattern(&self.s, self.support_threshold)
    }

    pub fn rank(&self) -> usize {
        self.l.eigenvalues().iter().filter(|&&v| v > self.rank_threshold).count()
    }

    /// Off-diagonal nonzeros of the thresholded `S`, counted once per pair.
    pub fn edge_count(&self) -> usize {
        let p = self.p();
        let mut n = 0;
        for i in 0..p {
            for j in i + 1..p {
                if self.s.get(i, j).abs() > self.support_threshold {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn warm_state(&self) -> Option<&AdmmState> {
        self.state.as_ref()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Edge list of the thresholded sparse part: `i,j,sign,value` for `i < j`.
    pub fn edges_csv(&self) -> String {
        let p = self.p();
        let mut out = String::from("i,j,sign,value\n");
        for i in 0..p {
            for j in i + 1..p {
                let v = self.s.get(i, j);
                if v.abs() > self.support_threshold {
                    let _ = writeln!(out, "{i},{j},{},{v:e}", if v > 0.0 { 1 } else { -1 });
                }
            }
        }
        out
    }
}

/// Row-major signs of `m` with entries at most `tol` in magnitude read as zero.
pub fn sign_pattern(m: &SymMatrix, tol: f64) -> Vec<i8> {
    m.to_row_major()
        .into_iter()
        .map(|v| {
            if v > tol {
                1
            } else if v < -tol {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// Proximal map of `t ||.||_1`: entrywise shrinkage towards zero.
pub fn soft_threshold(m: &SymMatrix, t: f64) -> Result<SymMatrix> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("threshold must be non-negative, got {t}")));
    }
    Ok(shrink(m, t))
}

fn shrink(m: &SymMatrix, t: f64) -> SymMatrix {
    m.map(|v| v.signum() * (v.abs() - t).max(0.0))
}

/// Proximal map of `t tr(.)` plus the indicator of the PSD cone:
/// eigenvalues `d -> max(d - t, 0)`.
pub fn psd_trace_prox(m: &SymMatrix, t: f64) -> Result<SymMatrix> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("threshold must be non-negative, got {t}")));
    }
    Ok(shrink_spectrum(m, t).0)
}

/// Also returns the number of eigenvalues that survive the shrinkage.
fn shrink_spectrum(m: &SymMatrix, t: f64) -> (SymMatrix, usize) {
    let eig = sym_eig_unchecked(m);
    let kept = eig.values.iter().take_while(|&&d| d > t).count();
    if kept == 0 {
        return (SymMatrix::zeros(m.dim()), 0);
    }
    let v = eig.vectors.columns(0, kept);
    let d: Vec<f64> = eig.values[..kept].iter().map(|&d| d - t).collect();
    let scaled = DMatrix::from_fn(m.dim(), kept, |i, k| v[(i, k)] * d[k]);
    (SymMatrix::symmetrized(scaled * v.transpose()), kept)
}

/// `argmin_R tr(R Sigma_n) - log det R + ||R - Z||_F^2 / (2t)`.
pub fn logdet_prox(z: &SymMatrix, sigma_n: &SymMatrix, t: f64) -> Result<SymMatrix> {
    if !(t > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {t}")));
    }
    z.check_dim(sigma_n)?;
    Ok(logdet_prox_with_inverse(z, sigma_n, t).0)
}

/// The prox together with the inverse of its value, which shares the eigenvectors.
fn logdet_prox_with_inverse(z: &SymMatrix, sigma_n: &SymMatrix, t: f64) -> (SymMatrix, SymMatrix) {
    let eig = sym_eig_unchecked(&z.axpy(-t, sigma_n));
    // positive root of x^2 - d x - t = 0, evaluated without cancellation
    let root = |d: f64| {
        let q = (d * d + 4.0 * t).sqrt();
        if d >= 0.0 {
            (d + q) / 2.0
        } else {
            2.0 * t / (q - d)
        }
    };
    let r = eig.map_spectrum(root);
    let r_inv = eig.map_spectrum(|d| 1.0 / root(d));
    (r, r_inv)
}

/// Value of the regularized likelihood; `+inf` when `S - L` is not positive definite.
pub fn objective(s: &SymMatrix, l: &SymMatrix, sigma_n: &SymMatrix, lambda: f64, gamma: f64) -> f64 {
    let k = s.sub(l);
    match matrix::logdet(&k) {
        Ok(ld) => k.inner(sigma_n) - ld + lambda * (gamma * s.l1() + l.trace()),
        Err(_) => f64::INFINITY,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity_s: f64,
    pub stationarity_l: f64,
    pub feasibility: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity_s.max(self.stationarity_l).max(self.feasibility)
    }
}

/// Distance of the gradient from the subdifferential of the penalty.
///
/// With `G = Sigma_n - (S - L)^{-1}`, optimality requires
/// `-G / (lambda gamma)` in the subdifferential of `||S||_1` and
/// `G / lambda` equal to the identity on the column space of `L` with
/// eigenvalues at most one on its complement.
pub fn kkt_residual(s: &SymMatrix, l: &SymMatrix, sigma_n: &SymMatrix, lambda: f64, gamma: f64) -> Result<KktResidual> {
    s.check_dim(l)?;
    s.check_dim(sigma_n)?;
    let k = s.sub(l);
    let k_inv = matrix::inverse(&k)?;
    Ok(kkt_from_inverse(s, l, sigma_n, &k_inv, lambda, gamma))
}

fn kkt_from_inverse(
    s: &SymMatrix,
    l: &SymMatrix,
    sigma_n: &SymMatrix,
    k_inv: &SymMatrix,
    lambda: f64,
    gamma: f64,
) -> KktResidual {
    let p = s.dim();
    let g = sigma_n.sub(k_inv);
    let lg = lambda * gamma;
    let mut stat_s: f64 = 0.0;
    for i in 0..p {
        for j in i..p {
            let x = -g.get(i, j) / lg;
            let v = s.get(i, j);
            let dev = if v != 0.0 {
                (x - v.signum()).abs()
            } else {
                (x.abs() - 1.0).max(0.0)
            };
            stat_s = stat_s.max(dev);
        }
    }

    let n = g.scale(1.0 / lambda);
    let l_norm = l.spectral_norm();
    let space = RankTangentSpace::from_matrix(l, 1e-10 * l_norm.max(1.0));
    let perp = project_tangent_unchecked(&space, &n, true);
    let excess = (perp.max_eigenvalue() - 1.0).max(0.0);
    let stat_l = if space.rank() == 0 {
        excess
    } else {
        let inside = project_tangent_unchecked(&space, &n, false);
        inside.sub(&space.projector()).spectral_norm().max(excess)
    };

    let feasibility = 0.0f64
        .max(-s.sub(l).min_eigenvalue())
        .max(-l.min_eigenvalue());
    KktResidual {
        stationarity_s: stat_s,
        stationarity_l: stat_l,
        feasibility,
    }
}

pub fn fit(sigma_n: &SampleCovariance, config: &SolverConfig) -> Result<DecompositionEstimate> {
    fit_from(&sigma_n.sigma_n, config, None)
}

/// Like [`fit`], starting from a previous iterate (typically a neighbouring
/// `(lambda, gamma)`).
pub fn fit_warm(
    sigma_n: &SampleCovariance,
    config: &SolverConfig,
    start: &DecompositionEstimate,
) -> Result<DecompositionEstimate> {
    fit_from(&sigma_n.sigma_n, config, start.warm_state())
}

/// Fits directly from a matrix, which must be positive semidefinite.
pub fn fit_matrix(sigma_n: &SymMatrix, config: &SolverConfig) -> Result<DecompositionEstimate> {
    let scale = sigma_n.spectral_norm().max(1.0);
    let min = sigma_n.min_eigenvalue();
    if !sigma_n.is_finite() || min < -1e-10 * scale {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    fit_from(sigma_n, config, None)
}

const BALANCE_EVERY: usize = 10;
const BALANCE_UNTIL: usize = 2000;
const KKT_EVERY: usize = 10;

fn fit_from(sigma_n: &SymMatrix, config: &SolverConfig, start: Option<&AdmmState>) -> Result<DecompositionEstimate> {
    config.validate()?;
    let (lambda, gamma) = (config.lambda, config.gamma);
    let lg = lambda * gamma;
    let mut st = match start {
        Some(s) if s.s.dim() == sigma_n.dim() => s.clone(),
        _ => AdmmState::cold(sigma_n, lg, config.rho_admm),
    };

    let mut iters = 0;
    let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);
    let mut converged = false;
    let mut next_kkt = 0;
    while iters < config.max_iters {
        iters += 1;
        let rho = st.rho;
        let (r, _) = logdet_prox_with_inverse(&st.s.sub(&st.l).sub(&st.u), sigma_n, 1.0 / rho);
        let s_new = shrink(&r.add(&st.l).add(&st.u), lg / rho);
        let (l_new, _) = shrink_spectrum(&s_new.sub(&r).sub(&st.u), lambda / rho);
        let resid = r.sub(&s_new).add(&l_new);
        let u_new = st.u.add(&resid);

        let ds = s_new.sub(&st.s).frobenius();
        let dl = l_new.sub(&st.l).frobenius();
        let k_new = s_new.sub(&l_new);
        primal = resid.frobenius() / 1f64.max(r.frobenius()).max(k_new.frobenius());
        dual = rho * (ds * ds + dl * dl).sqrt() / 1f64.max(rho * u_new.frobenius());
        st = AdmmState {
            s: s_new,
            l: l_new,
            u: u_new,
            rho,
        };

        if primal <= config.tol_primal && dual <= config.tol_dual && iters >= next_kkt {
            let ok = matrix::inverse(&k_new)
                .map(|k_inv| kkt_from_inverse(&st.s, &st.l, sigma_n, &k_inv, lambda, gamma).max() <= config.kkt_tol())
                .unwrap_or(false);
            if ok {
                converged = true;
                break;
            }
            next_kkt = iters + KKT_EVERY;
        }

        if config.adaptive_rho && iters % BALANCE_EVERY == 0 && iters <= BALANCE_UNTIL {
            if primal > 10.0 * dual {
                st.rho *= 2.0;
                st.u = st.u.scale(0.5);
            } else if dual > 10.0 * primal {
                st.rho *= 0.5;
                st.u = st.u.scale(2.0);
            }
        }
    }

    let s_max = st.s.max_abs();
    let l_norm = st.l.spectral_norm();
    Ok(DecompositionEstimate {
        objective: objective(&st.s, &st.l, sigma_n, lambda, gamma),
        s: st.s.clone(),
        l: st.l.clone(),
        iters,
        primal_residual: primal,
        dual_residual: dual,
        converged,
        lambda,
        gamma,
        support_threshold: config.support_tol * s_max,
        rank_threshold: config.rank_tol * l_norm,
        state: Some(st),
    })
}

/// `lambda = scale * sqrt(p / n) / xi_hint`; `xi_hint` defaults to one.
pub fn lambda_schedule(p: usize, n: usize, xi_hint: Option<f64>, scale: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("lambda schedule needs n >= 1"));
    }
    let xi = xi_hint.unwrap_or(1.0);
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::invalid(format!("xi hint must lie in (0, 1], got {xi}")));
    }
    Ok(scale / xi * (p as f64 / n as f64).sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub rank: usize,
    pub edges: usize,
    pub converged: bool,
    pub iters: usize,
    /// Index of the stability run this point belongs to.
    pub run: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    pub lambda: f64,
    pub points: Vec<SweepPoint>,
    /// Maximal contiguous index ranges `[start, end]` with identical sign pattern and rank.
    pub runs: Vec<(usize, usize)>,
    /// Middle grid point of the longest run (the first one on ties).
    pub recommended_gamma: f64,
    pub recommended_index: usize,
    #[serde(skip)]
    pub estimates: Vec<DecompositionEstimate>,
}

impl StabilityReport {
    pub fn recommended(&self) -> &DecompositionEstimate {
        &self.estimates[self.recommended_index]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,rank,edges,converged,iters,run\n");
        for pt in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                pt.gamma, pt.rank, pt.edges, pt.converged, pt.iters, pt.run
            );
        }
        out
    }
}

/// Fits along an ascending `gamma` grid with warm starts and reports where
/// the sign pattern of `S` and the rank of `L` are stable.
pub fn gamma_sweep(
    sigma_n: &SampleCovariance,
    lambda: f64,
    gamma_grid: &[f64],
    config: &SolverConfig,
) -> Result<StabilityReport> {
    if gamma_grid.is_empty() {
        return Err(Error::invalid("gamma grid is empty"));
    }
    if gamma_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("gamma grid must be strictly ascending"));
    }
    let mut estimates: Vec<DecompositionEstimate> = Vec::with_capacity(gamma_grid.len());
    for &gamma in gamma_grid {
        let cfg = SolverConfig {
            lambda,
            gamma,
            ..config.clone()
        };
        let est = match estimates.last() {
            Some(prev) => fit_warm(sigma_n, &cfg, prev)?,
            None => fit(sigma_n, &cfg)?,
        };
        estimates.push(est);
    }
    let keys: Vec<(Vec<i8>, usize)> = estimates.iter().map(|e| (e.sign_pattern(), e.rank())).collect();
    let mut runs = vec![(0usize, 0usize)];
    for k in 1..keys.len() {
        if keys[k] == keys[k - 1] {
            runs.last_mut().expect("nonempty").1 = k;
        } else {
            runs.push((k, k));
        }
    }
    let (best_start, best_end) = runs
        .iter()
        .copied()
        .fold((0, 0), |acc, r| if r.1 - r.0 > acc.1 - acc.0 { r } else { acc });
    let recommended_index = (best_start + best_end) / 2;
    let points = estimates
        .iter()
        .enumerate()
        .map(|(k, e)| SweepPoint {
            gamma: e.gamma,
            rank: e.rank(),
            edges: e.edge_count(),
            converged: e.converged,
            iters: e.iters,
            run: runs.iter().position(|&(a, b)| a <= k && k <= b).expect("covered"),
        })
        .collect();
    Ok(StabilityReport {
        lambda,
        points,
        runs,
        recommended_gamma: gamma_grid[recommended_index],
        recommended_index,
        estimates,
    })
}
