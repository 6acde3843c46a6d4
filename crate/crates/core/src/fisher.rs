//! Fisher information of the marginal model and the gains that govern
//! identifiability of the sparse and low-rank parts.
//!
//! At the true marginal concentration the Fisher information acts on a
//! symmetric perturbation `N` as `Sigma N Sigma`. Everything here is
//! matrix-free except the small restricted operators assembled on the
//! support (entry coordinates) and on tangent spaces (an orthonormal basis).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    gamma_norms, gaussian_sym, project_support_unchecked, project_tangent_unchecked, MuValue, RankTangentSpace,
    SupportSpace, XiBracket,
};
use crate::matrix::{self, rng_from_seed, sym_eig_unchecked, SymMatrix};

pub const DEFAULT_NEARBY_SAMPLES: usize = 16;

#[derive(Clone, Debug)]
pub struct FisherOperator {
    sigma: SymMatrix,
}

impl FisherOperator {
    /// `sigma` is the marginal covariance and must be positive definite.
    pub fn new(sigma: SymMatrix) -> Result<Self> {
        let min = sigma.min_eigenvalue();
        if !(min > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> &SymMatrix {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.sigma.dim()
    }

    /// `psi = ||Sigma||_2`; the operator norm of the Fisher map is `psi^2`.
    pub fn psi(&self) -> f64 {
        self.sigma.spectral_norm()
    }

    pub fn apply(&self, n: &SymMatrix) -> SymMatrix {
        n.congruence(self.sigma.as_matrix())
    }

    /// `max_i sum_j |Sigma_ij|`; squared, it bounds the map in the entrywise max norm.
    fn row_sum_bound(&self) -> f64 {
        let s = self.sigma.as_matrix();
        (0..self.dim()).map(|i| s.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }
}

pub fn fisher_apply(op: &FisherOperator, n: &SymMatrix) -> Result<SymMatrix> {
    op.sigma.check_dim(n)?;
    Ok(op.apply(n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Exact,
    /// The true value is at least this.
    Lower,
    /// The true value is at most this.
    Upper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub bound: Bound,
}

impl Estimate {
    fn new(value: f64, bound: Bound) -> Self {
        Self { value, bound }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OmegaGains {
    pub alpha: Estimate,
    pub delta: Estimate,
    pub beta: Estimate,
    /// Certified upper bound on `beta`, namely `psi^2`.
    pub beta_upper: f64,
}

/// Entries `(i, j)`, `i <= j`, that are inside (`true`) or outside the support.
fn split_entries(omega: &SupportSpace) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let p = omega.dim();
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for i in 0..p {
        for j in i..p {
            if omega.contains(i, j) {
                inside.push((i, j));
            } else {
                outside.push((i, j));
            }
        }
    }
    (inside, outside)
}

/// Entry `(a, b)` of `Sigma E Sigma` where `E` is the symmetric unit with
/// ones at `(k, l)` and `(l, k)`.
fn unit_image(s: &DMatrix<f64>, (a, b): (usize, usize), (k, l): (usize, usize)) -> f64 {
    if k == l {
        s[(a, k)] * s[(k, b)]
    } else {
        s[(a, k)] * s[(l, b)] + s[(a, l)] * s[(k, b)]
    }
}

/// Restricted operator in entry coordinates: a symmetric matrix supported on
/// `cols` is described by its entry values, and so is its image on `rows`.
/// The max-entry norm of a symmetric matrix is the vector max norm of these
/// coordinates, so induced infinity norms are plain row sums.
fn entry_operator(op: &FisherOperator, rows: &[(usize, usize)], cols: &[(usize, usize)]) -> DMatrix<f64> {
    let s = op.sigma.as_matrix();
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| unit_image(s, rows[r], cols[c]))
}

fn max_row_sum(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn omega_gains(op: &FisherOperator, omega: &SupportSpace) -> Result<OmegaGains> {
    omega_gains_seeded(op, omega, 0)
}

pub fn omega_gains_seeded(op: &FisherOperator, omega: &SupportSpace, seed: u64) -> Result<OmegaGains> {
    if omega.dim() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            found: omega.dim(),
        });
    }
    let (inside, outside) = split_entries(omega);
    if inside.is_empty() {
        return Err(Error::invalid("support is empty"));
    }
    let b = entry_operator(op, &inside, &inside);
    let scale = max_row_sum(&b);
    let inv = b.clone().try_inverse().ok_or(Error::AlphaZero)?;
    let inv_norm = max_row_sum(&inv);
    if !inv_norm.is_finite() || inv_norm * scale > 1e14 {
        return Err(Error::AlphaZero);
    }
    let alpha = 1.0 / inv_norm;
    let delta = if outside.is_empty() {
        0.0
    } else {
        max_row_sum(&entry_operator(op, &outside, &inside))
    };
    let beta = beta_omega_ascent(op, omega, seed);
    Ok(OmegaGains {
        alpha: Estimate::new(alpha, Bound::Exact),
        delta: Estimate::new(delta, Bound::Exact),
        beta: Estimate::new(beta, Bound::Lower),
        beta_upper: op.psi().powi(2),
    })
}

/// Spectral gain `||Sigma M Sigma||_2 / ||M||_2`.
fn spectral_gain(op: &FisherOperator, m: &SymMatrix) -> f64 {
    let n = m.spectral_norm();
    if n > 0.0 {
        op.apply(m).spectral_norm() / n
    } else {
        0.0
    }
}

/// Largest `||Sigma M Sigma||_2` over unit-spectral-norm `M` in `Omega`.
///
/// Starts from every diagonal unit (which makes the result at least the
/// smallest `Omega` gain) plus random elements, and improves the best start
/// by following the leading singular direction of the image.
fn beta_omega_ascent(op: &FisherOperator, omega: &SupportSpace, seed: u64) -> f64 {
    let p = op.dim();
    let mut best = 0.0;
    let mut best_m = None;
    let mut consider = |m: SymMatrix| {
        let g = spectral_gain(op, &m);
        if g > best {
            best = g;
            best_m = Some(m);
        }
    };
    for i in 0..p {
        if omega.contains(i, i) {
            let mut e = SymMatrix::zeros(p);
            e.set(i, i, 1.0);
            consider(e);
        }
    }
    let mut rng = rng_from_seed(seed);
    for _ in 0..8 {
        consider(project_support_unchecked(omega, &gaussian_sym(p, &mut rng)));
    }
    // top eigenvector of Sigma, restricted to the support
    let eig = sym_eig_unchecked(&op.sigma);
    let v = eig.vectors.column(0).into_owned();
    consider(project_support_unchecked(omega, &SymMatrix::symmetrized(&v * v.transpose())));

    let Some(mut m) = best_m else { return 0.0 };
    let mut step = 1.0;
    for _ in 0..100 {
        let m_norm = m.spectral_norm();
        m = m.scale(1.0 / m_norm);
        let img = op.apply(&m);
        let e = sym_eig_unchecked(&img);
        let k = if e.values[0].abs() >= e.values[p - 1].abs() { 0 } else { p - 1 };
        let w = e.vectors.column(k).into_owned();
        // d/dM of w^T Sigma M Sigma w
        let sw = op.sigma.as_matrix() * &w;
        let grad = project_support_unchecked(
            omega,
            &SymMatrix::symmetrized(&sw * sw.transpose()).scale(e.values[k].signum()),
        );
        let gn = grad.frobenius();
        if gn < 1e-14 {
            break;
        }
        let cand = m.axpy(step / gn, &grad);
        let g = spectral_gain(op, &cand);
        if g > best {
            best = g;
            m = cand;
        } else {
            step *= 0.5;
            if step < 1e-6 {
                break;
            }
        }
    }
    best
}

/// Orthonormal basis (Frobenius inner product) of the tangent space.
fn tangent_basis(t: &RankTangentSpace) -> Vec<SymMatrix> {
    let p = t.dim();
    let r = t.rank();
    let u = t.basis();
    let comp = {
        let eig = sym_eig_unchecked(&SymMatrix::identity(p).sub(&t.projector()));
        eig.vectors.columns(0, p - r).into_owned()
    };
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::with_capacity(r * (r + 1) / 2 + r * (p - r));
    for a in 0..r {
        for b in a..r {
            let ua = u.column(a);
            let ub = u.column(b);
            let m = if a == b {
                ua * ua.transpose()
            } else {
                (ua * ub.transpose() + ub * ua.transpose()) * s2
            };
            out.push(SymMatrix::symmetrized(m));
        }
        for k in 0..p - r {
            let ua = u.column(a);
            let w = comp.column(k);
            out.push(SymMatrix::symmetrized((ua * w.transpose() + w * ua.transpose()) * s2));
        }
    }
    out
}

fn combine(basis: &[SymMatrix], c: &DVector<f64>) -> SymMatrix {
    let p = basis[0].dim();
    let mut m = DMatrix::zeros(p, p);
    for (b, &w) in basis.iter().zip(c.iter()) {
        m += b.as_matrix() * w;
    }
    SymMatrix::symmetrized(m)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TangentGains {
    /// Smallest gain seen over the sampled spaces: an upper bound on the infimum.
    pub alpha: Estimate,
    pub delta: Estimate,
    pub beta: Estimate,
    /// Certified upper bound on `beta`: `(max_i sum_j |Sigma_ij|)^2`.
    pub beta_upper: f64,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug)]
struct SpaceGains {
    alpha: f64,
    delta: f64,
    beta: f64,
}

fn gains_at(op: &FisherOperator, t: &RankTangentSpace, rng: &mut ChaCha8Rng) -> SpaceGains {
    let basis = tangent_basis(t);
    let d = basis.len();
    let images: Vec<SymMatrix> = basis.iter().map(|b| op.apply(b)).collect();
    let perp: Vec<SymMatrix> = images.iter().map(|m| project_tangent_unchecked(t, m, true)).collect();
    let g = DMatrix::from_fn(d, d, |i, j| basis[i].inner(&images[j]));
    let h = DMatrix::from_fn(d, d, |i, j| perp[i].inner(&perp[j]));
    let g = SymMatrix::symmetrized(g);
    let h = SymMatrix::symmetrized(h);

    let mut candidates: Vec<DVector<f64>> = Vec::new();
    let eg = sym_eig_unchecked(&g);
    let eh = sym_eig_unchecked(&h);
    for k in 0..d.min(3) {
        candidates.push(eg.vectors.column(d - 1 - k).into_owned());
        candidates.push(eg.vectors.column(k).into_owned());
        candidates.push(eh.vectors.column(k).into_owned());
    }
    for _ in 0..16 {
        candidates.push(DVector::from_fn(d, |_, _| rng.sample(StandardNormal)));
    }

    let mut alpha = f64::INFINITY;
    let mut delta: f64 = 0.0;
    let mut beta: f64 = 0.0;
    for c in &candidates {
        let m = combine(&basis, c);
        let n2 = m.spectral_norm();
        if n2 <= 0.0 {
            continue;
        }
        let img = op.apply(&m);
        let inside = project_tangent_unchecked(t, &img, false);
        alpha = alpha.min(inside.spectral_norm() / n2);
        delta = delta.max(img.sub(&inside).spectral_norm() / n2);
        beta = beta.max(img.max_abs() / m.max_abs());
    }
    // projected coordinate units: the elements of T most aligned with one entry
    let lev = t.leverage();
    let mut order: Vec<usize> = (0..lev.len()).collect();
    order.sort_by(|&a, &b| lev[b].total_cmp(&lev[a]));
    for &i in order.iter().take(4) {
        let mut e = SymMatrix::zeros(t.dim());
        e.set(i, i, 1.0);
        let m = project_tangent_unchecked(t, &e, false);
        if m.max_abs() > 0.0 {
            beta = beta.max(op.apply(&m).max_abs() / m.max_abs());
        }
    }
    SpaceGains { alpha, delta, beta }
}

/// Tangent space at angle `theta` from `t`: `U' = U cos(theta) + W sin(theta)`
/// with `W` orthonormal and orthogonal to `U`, so that
/// `||P_U' - P_U||_2 = sin(theta)`.
pub fn rotated_space(t: &RankTangentSpace, theta: f64, rng: &mut ChaCha8Rng) -> Result<RankTangentSpace> {
    let p = t.dim();
    let r = t.rank();
    if 2 * r > p {
        return Err(Error::invalid("rotation needs 2r <= p"));
    }
    let u = t.basis();
    let g = DMatrix::<f64>::from_fn(p, r, |_, _| rng.sample(StandardNormal));
    let g = &g - u * (u.transpose() * &g);
    let w = g.qr().q();
    RankTangentSpace::new(u * theta.cos() + w * theta.sin())
}

/// Gains over tangent spaces near `t`.
///
/// The first sample is `t` itself; the others are rotations of `t` whose
/// certified twisting bound `2 ||P_U' - P_U||_2` equals `xi_upper / 2`, so
/// every sampled space satisfies the closeness constraint.
pub fn t_gains(
    op: &FisherOperator,
    t: &RankTangentSpace,
    xi_upper: f64,
    nearby_samples: usize,
    seed: u64,
) -> Result<TangentGains> {
    if t.dim() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            found: t.dim(),
        });
    }
    if nearby_samples == 0 {
        return Err(Error::invalid("nearby_samples must be at least 1"));
    }
    let beta_upper = op.row_sum_bound().powi(2);
    if t.rank() == 0 {
        return Ok(TangentGains {
            alpha: Estimate::new(f64::INFINITY, Bound::Exact),
            delta: Estimate::new(0.0, Bound::Exact),
            beta: Estimate::new(0.0, Bound::Exact),
            beta_upper,
            samples: 0,
        });
    }
    let mut rng = rng_from_seed(seed);
    let theta = (xi_upper / 4.0).clamp(0.0, 1.0).asin();
    let mut acc = gains_at(op, t, &mut rng);
    let mut used = 1;
    for _ in 1..nearby_samples {
        let Ok(tp) = rotated_space(t, theta, &mut rng) else { break };
        let g = gains_at(op, &tp, &mut rng);
        acc.alpha = acc.alpha.min(g.alpha);
        acc.delta = acc.delta.max(g.delta);
        acc.beta = acc.beta.max(g.beta);
        used += 1;
    }
    Ok(TangentGains {
        alpha: Estimate::new(acc.alpha, Bound::Upper),
        delta: Estimate::new(acc.delta, Bound::Lower),
        beta: Estimate::new(acc.beta.min(beta_upper), Bound::Lower),
        beta_upper,
        samples: used,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FisherDiagnostics {
    pub alpha_omega: Estimate,
    pub delta_omega: Estimate,
    pub beta_omega: Estimate,
    pub alpha_t: Estimate,
    pub delta_t: Estimate,
    pub beta_t: Estimate,
    pub alpha: f64,
    pub delta: f64,
    pub beta: f64,
    pub psi: f64,
    pub nu: Option<f64>,
    /// Admissible `gamma` interval, present only when nonempty.
    pub gamma_range: Option<(f64, f64)>,
    pub assumption_holds: bool,
    pub product_condition_holds: bool,
    /// `mu` and `xi` used for the product condition and the range.
    pub mu_used: f64,
    pub xi_used: f64,
    pub nearby_samples: usize,
    /// The tangent-space gains are sampled, so the range is a best-effort certificate.
    pub sampled: bool,
}

/// Largest `nu` in `(0, 1/2]` with `delta / alpha <= 1 - 2 nu`.
pub fn nu_value(alpha: f64, delta: f64) -> Option<f64> {
    let ratio = delta / alpha;
    if alpha > 0.0 && ratio < 1.0 {
        Some(((1.0 - ratio) / 2.0).min(0.5))
    } else {
        None
    }
}

/// `(low, high)` for `gamma`; may be empty (`low > high`).
pub fn gamma_bounds(alpha: f64, beta: f64, nu: f64, mu: f64, xi: f64) -> (f64, f64) {
    let c = beta * (2.0 - nu) / (nu * alpha);
    (3.0 * c * xi, 1.0 / (2.0 * c * mu))
}

pub fn product_condition(alpha: f64, beta: f64, nu: f64, mu: f64, xi: f64) -> bool {
    let rhs = (nu * alpha / (beta * (2.0 - nu))).powi(2) / 6.0;
    mu * xi <= rhs
}

pub fn diagnostics(
    op: &FisherOperator,
    omega: &SupportSpace,
    t: &RankTangentSpace,
    mu: &MuValue,
    xi: &XiBracket,
    nearby_samples: usize,
    seed: u64,
) -> Result<FisherDiagnostics> {
    let og = omega_gains_seeded(op, omega, seed)?;
    let tg = t_gains(op, t, xi.upper, nearby_samples, seed)?;
    let alpha = og.alpha.value.min(tg.alpha.value);
    let delta = og.delta.value.max(tg.delta.value);
    let beta = og.beta.value.max(tg.beta.value);
    if !(alpha > 0.0) {
        return Err(Error::AlphaZero);
    }
    let nu = nu_value(alpha, delta);
    let (mu_used, xi_used) = (mu.upper, xi.upper);
    let (product_condition_holds, gamma_range) = match nu {
        Some(nu) => {
            let (lo, hi) = gamma_bounds(alpha, beta, nu, mu_used, xi_used);
            (
                product_condition(alpha, beta, nu, mu_used, xi_used),
                (lo <= hi).then_some((lo, hi)),
            )
        }
        None => (false, None),
    };
    Ok(FisherDiagnostics {
        alpha_omega: og.alpha,
        delta_omega: og.delta,
        beta_omega: og.beta,
        alpha_t: tg.alpha,
        delta_t: tg.delta,
        beta_t: tg.beta,
        alpha,
        delta,
        beta,
        psi: op.psi(),
        nu,
        gamma_range,
        assumption_holds: nu.is_some(),
        product_condition_holds,
        mu_used,
        xi_used,
        nearby_samples: tg.samples,
        sampled: t.rank() > 0,
    })
}

/// `(K + Delta)^{-1} - K^{-1} + K^{-1} Delta K^{-1}`: the part of the
/// inverse beyond its first-order expansion.
pub fn taylor_remainder(k: &SymMatrix, delta: &SymMatrix) -> Result<SymMatrix> {
    k.check_dim(delta)?;
    let k_inv = matrix::inverse(k)?;
    let kd_inv = matrix::inverse(&k.add(delta))?;
    let first = delta.congruence(k_inv.as_matrix());
    Ok(kd_inv.sub(&k_inv).add(&first))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RestrictedGainReport {
    pub trials: usize,
    /// Smallest `g_gamma` of the restricted image over the samples.
    pub min_inside: f64,
    /// Largest ratio of the off-space image to the restricted image.
    pub max_leak_ratio: f64,
    pub inside_ok: bool,
    pub leak_ok: bool,
}

/// Samples `(S, L)` in `Omega x T` with `||S||_inf = gamma` and
/// `||L||_2 = 1` and measures the Fisher map composed with addition: its
/// restriction to `Omega x T` should have gain at least `alpha / 2` and its
/// leakage outside should be at most `1 - nu` times that.
#[allow(clippy::too_many_arguments)]
pub fn restricted_gain_check(
    op: &FisherOperator,
    omega: &SupportSpace,
    t: &RankTangentSpace,
    gamma: f64,
    alpha: f64,
    nu: f64,
    trials: usize,
    seed: u64,
) -> Result<RestrictedGainReport> {
    let p = op.dim();
    let mut rng = rng_from_seed(seed);
    let mut min_inside = f64::INFINITY;
    let mut max_leak_ratio: f64 = 0.0;
    for _ in 0..trials {
        let s = project_support_unchecked(omega, &gaussian_sym(p, &mut rng));
        let l = project_tangent_unchecked(t, &gaussian_sym(p, &mut rng), false);
        if s.max_abs() == 0.0 {
            continue;
        }
        let s = s.scale(gamma / s.max_abs());
        let l_norm = l.spectral_norm();
        let l = if l_norm > 0.0 { l.scale(1.0 / l_norm) } else { l };
        let img = op.apply(&s.add(&l));
        let in_s = project_support_unchecked(omega, &img);
        let in_l = project_tangent_unchecked(t, &img, false);
        let (_, g_in) = gamma_norms(&in_s, &in_l, gamma)?;
        let (_, g_out) = gamma_norms(&img.sub(&in_s), &img.sub(&in_l), gamma)?;
        min_inside = min_inside.min(g_in);
        if g_in > 0.0 {
            max_leak_ratio = max_leak_ratio.max(g_out / g_in);
        }
    }
    let slack = 1e-9;
    Ok(RestrictedGainReport {
        trials,
        min_inside,
        max_leak_ratio,
        inside_ok: min_inside >= alpha / 2.0 - slack,
        leak_ok: max_leak_ratio <= 1.0 - nu + slack,
    })
}
