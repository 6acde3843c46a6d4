//! Tangent spaces of the sparse and low-rank varieties and the quantities
//! that measure how well the two spaces are separated.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{rng_from_seed, sym_eig_unchecked, SymMatrix};

/// Sparse tangent space: all symmetric matrices supported inside `mask`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSpace {
    p: usize,
    mask: Vec<bool>,
}

impl SupportSpace {
    /// `mask` is row-major `p x p` and must be symmetric.
    pub fn new(p: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != p * p {
            return Err(Error::DimensionMismatch {
                expected: p * p,
                found: mask.len(),
            });
        }
        for i in 0..p {
            for j in 0..i {
                if mask[i * p + j] != mask[j * p + i] {
                    return Err(Error::invalid(format!("support mask not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { p, mask })
    }

    /// Support of `m`: entries with `|m_ij| > tol`.
    pub fn from_matrix(m: &SymMatrix, tol: f64) -> Self {
        let p = m.dim();
        let mask = (0..p * p).map(|k| m.get(k / p, k % p).abs() > tol).collect();
        Self { p, mask }
    }

    pub fn full(p: usize) -> Self {
        Self {
            p,
            mask: vec![true; p * p],
        }
    }

    pub fn diagonal(p: usize) -> Self {
        Self {
            p,
            mask: (0..p * p).map(|k| k / p == k % p).collect(),
        }
    }

    pub fn empty(p: usize) -> Self {
        Self {
            p,
            mask: vec![false; p * p],
        }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.p + j]
    }

    /// Number of masked entries, counting `(i, j)` and `(j, i)` separately.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Independent entries `(i, j)` with `i <= j`.
    pub fn free_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.p {
            for j in i..self.p {
                if self.contains(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// (max, min) number of masked entries per row.
    pub fn degree_range(&self) -> (usize, usize) {
        let counts: Vec<usize> = (0..self.p)
            .map(|i| (0..self.p).filter(|&j| self.contains(i, j)).count())
            .collect();
        (
            counts.iter().copied().max().unwrap_or(0),
            counts.iter().copied().min().unwrap_or(0),
        )
    }

    /// Connected components of the support graph (each vertex with its entries).
    fn components(&self) -> Vec<Vec<usize>> {
        let p = self.p;
        let mut label = vec![usize::MAX; p];
        let mut comps = Vec::new();
        for start in 0..p {
            if label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut stack = vec![start];
            let mut members = Vec::new();
            label[start] = id;
            while let Some(v) = stack.pop() {
                members.push(v);
                for w in 0..p {
                    if w != v && self.contains(v, w) && label[w] == usize::MAX {
                        label[w] = id;
                        stack.push(w);
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
        comps
    }
}

/// Tangent space to the low-rank variety at a symmetric matrix with column space `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTangentSpace {
    u: DMatrix<f64>,
}

impl RankTangentSpace {
    /// `basis` must have orthonormal columns.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let r = basis.ncols();
        let gram = basis.transpose() * &basis;
        let err = (gram - DMatrix::identity(r, r)).abs().max();
        if r > 0 && err > 1e-10 {
            return Err(Error::invalid(format!("basis columns are not orthonormal (error {err:e})")));
        }
        Ok(Self { u: basis })
    }

    /// Orthonormalizes the columns of `m` (which must have full column rank).
    pub fn from_span(m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() == 0 {
            return Ok(Self { u: m.clone() });
        }
        let qr = m.clone().qr();
        let r = qr.r();
        let scale = r.abs().max();
        if (0..m.ncols()).any(|k| r[(k, k)].abs() <= 1e-12 * scale) {
            return Err(Error::invalid("spanning set is rank deficient"));
        }
        Ok(Self { u: qr.q() })
    }

    /// Column space of a symmetric matrix: eigenvectors with `|eigenvalue| > tol`.
    pub fn from_matrix(m: &SymMatrix, tol: f64) -> Self {
        let eig = sym_eig_unchecked(m);
        let keep: Vec<usize> = (0..m.dim()).filter(|&k| eig.values[k].abs() > tol).collect();
        Self {
            u: eig.vectors.select_columns(&keep),
        }
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn projector(&self) -> SymMatrix {
        SymMatrix::symmetrized(&self.u * self.u.transpose())
    }

    /// Squared row norms of `U`, i.e. `||P_U e_i||^2`.
    pub fn leverage(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.u.row(i).norm_squared()).collect()
    }

    pub fn incoherence(&self) -> f64 {
        self.leverage().into_iter().fold(0.0, f64::max).sqrt()
    }

    fn project(&self, n: &SymMatrix) -> SymMatrix {
        if self.rank() == 0 {
            return SymMatrix::zeros(self.dim());
        }
        let u = &self.u;
        let a = u.transpose() * n.as_matrix(); // r x p
        let ua = u * &a; // P_U N
        let core = &a * u; // U^T N U
        SymMatrix::symmetrized(&ua + ua.transpose() - u * core * u.transpose())
    }
}

pub fn incoherence(space: &RankTangentSpace) -> f64 {
    space.incoherence()
}

pub fn project_support(space: &SupportSpace, n: &SymMatrix) -> Result<SymMatrix> {
    if space.dim() != n.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            found: n.dim(),
        });
    }
    Ok(project_support_unchecked(space, n))
}

pub(crate) fn project_support_unchecked(space: &SupportSpace, n: &SymMatrix) -> SymMatrix {
    let p = n.dim();
    SymMatrix::from_fn(p, |i, j| if space.contains(i, j) { n.get(i, j) } else { 0.0 })
}

/// `P_T(N)`, or `(I - P_U) N (I - P_U)` when `orthogonal` is set.
pub fn project_tangent(space: &RankTangentSpace, n: &SymMatrix, orthogonal: bool) -> Result<SymMatrix> {
    if space.dim() != n.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            found: n.dim(),
        });
    }
    Ok(project_tangent_unchecked(space, n, orthogonal))
}

pub(crate) fn project_tangent_unchecked(space: &RankTangentSpace, n: &SymMatrix, orthogonal: bool) -> SymMatrix {
    let t = space.project(n);
    if orthogonal {
        n.sub(&t)
    } else {
        t
    }
}

pub(crate) fn gaussian_sym(p: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
    let g = DMatrix::<f64>::from_fn(p, p, |_, _| rng.sample(StandardNormal));
    SymMatrix::symmetrized(g)
}

/// Bracket for the largest entry of a unit-spectral-norm element of `T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiBracket {
    pub lower: f64,
    pub upper: f64,
    pub inc: f64,
    /// Best value found by the ascent and the diagonal witness.
    pub ascent_lower: f64,
}

/// Largest `N_ii` over `{N in T, ||N||_2 <= 1}` for a coordinate whose
/// projection onto the column space has norm `a`.
///
/// Within the plane spanned by `P_U e_i` and its complement the problem is
/// two-dimensional and solvable in closed form.
pub fn diagonal_witness(a: f64) -> f64 {
    let a = a.clamp(0.0, 1.0);
    if a * a >= 0.5 {
        1.0
    } else {
        2.0 * a * (1.0 - a * a).sqrt()
    }
}

/// `max |N_ij|` over unit-spectral-norm elements: bounded below by the
/// incoherence, a diagonal witness and projected ascent; above by `2 inc`.
pub fn xi_bracket(space: &RankTangentSpace, refine_iters: usize) -> XiBracket {
    xi_bracket_seeded(space, refine_iters, 0)
}

pub fn xi_bracket_seeded(space: &RankTangentSpace, refine_iters: usize, seed: u64) -> XiBracket {
    if space.rank() == 0 {
        return XiBracket {
            lower: 0.0,
            upper: 0.0,
            inc: 0.0,
            ascent_lower: 0.0,
        };
    }
    let inc = space.incoherence();
    let witness = space
        .leverage()
        .into_iter()
        .map(|l| diagonal_witness(l.sqrt()))
        .fold(0.0, f64::max);
    let mut rng = rng_from_seed(seed);
    let mut best = witness;
    for restart in 0..refine_iters {
        let start = if restart == 0 {
            // aligned with the most coherent coordinate pair
            let lev = space.leverage();
            let mut order: Vec<usize> = (0..lev.len()).collect();
            order.sort_by(|&a, &b| lev[b].total_cmp(&lev[a]));
            let (i, j) = (order[0], *order.get(1).unwrap_or(&order[0]));
            let mut e = SymMatrix::zeros(space.dim());
            e.set(i, j, 1.0);
            space.project(&e)
        } else {
            space.project(&gaussian_sym(space.dim(), &mut rng))
        };
        best = best.max(ascend_entry(space, start, 200));
    }
    let upper = 2.0 * inc;
    let lower = inc.max(best).min(upper);
    XiBracket {
        lower,
        upper,
        inc,
        ascent_lower: best,
    }
}

/// Ratio `||N||_inf / ||N||_2` of a nonzero matrix.
fn entry_ratio(n: &SymMatrix) -> f64 {
    let s = n.spectral_norm();
    if s > 0.0 {
        n.max_abs() / s
    } else {
        0.0
    }
}

/// Normalized-gradient ascent of `|X_ij| / ||X||_2` over `X in T`, where
/// `(i, j)` tracks the current largest entry.
fn ascend_entry(space: &RankTangentSpace, mut x: SymMatrix, iters: usize) -> f64 {
    let p = space.dim();
    let mut best = entry_ratio(&x);
    let mut step = 0.5;
    for _ in 0..iters {
        let norm = x.spectral_norm();
        if norm == 0.0 {
            break;
        }
        x = x.scale(1.0 / norm);
        let (mut bi, mut bj, mut bv) = (0, 0, 0.0);
        for i in 0..p {
            for j in i..p {
                let v = x.get(i, j);
                if v.abs() > bv {
                    (bi, bj, bv) = (i, j, v.abs());
                }
            }
        }
        let sign = x.get(bi, bj).signum();
        let eig = sym_eig_unchecked(&x);
        let k = if eig.values[0].abs() >= eig.values[p - 1].abs() { 0 } else { p - 1 };
        let v = eig.vectors.column(k).into_owned();
        let mut e = SymMatrix::zeros(p);
        e.set(bi, bj, if bi == bj { sign } else { 0.5 * sign });
        let top = SymMatrix::symmetrized(&v * v.transpose()).scale(eig.values[k].signum());
        let grad = space.project(&e.axpy(-bv, &top));
        let gnorm = grad.frobenius();
        if gnorm < 1e-12 {
            break;
        }
        let cand = x.axpy(step / gnorm, &grad);
        let r = entry_ratio(&cand);
        if r > best {
            best = r;
            x = cand;
        } else {
            step *= 0.5;
            if step < 1e-6 {
                break;
            }
        }
    }
    best
}

/// Largest `||N||_inf / ||N||_2` over `samples` Gaussian elements of `T`.
pub fn xi_monte_carlo(space: &RankTangentSpace, samples: usize, seed: u64) -> f64 {
    if space.rank() == 0 {
        return 0.0;
    }
    let mut rng = rng_from_seed(seed);
    (0..samples)
        .map(|_| entry_ratio(&space.project(&gaussian_sym(space.dim(), &mut rng))))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuValue {
    /// Exact value when `exact`, otherwise a lower bound.
    pub value: f64,
    /// Certified upper bound (the value itself when exact).
    pub upper: f64,
    pub exact: bool,
}

/// Largest spectral norm of an element of `Omega` with entries bounded by one.
///
/// The maximum of a convex function over the box sits at a vertex, so when
/// every connected component of the support has at most `exact_limit`
/// independent entries all sign patterns are enumerated (one global sign
/// per component is fixed by symmetry). Otherwise the result is the best
/// of random and greedy vertices, bracketed above by the maximum degree.
pub fn mu_value(space: &SupportSpace, exact_limit: usize) -> MuValue {
    mu_value_seeded(space, exact_limit, 0)
}

pub fn mu_value_seeded(space: &SupportSpace, exact_limit: usize, seed: u64) -> MuValue {
    let (deg_max, deg_min) = space.degree_range();
    if space.is_empty() {
        return MuValue {
            value: 0.0,
            upper: 0.0,
            exact: true,
        };
    }
    let comps = space.components();
    let local: Vec<(Vec<usize>, Vec<(usize, usize)>)> = comps
        .into_iter()
        .map(|members| {
            let mut entries = Vec::new();
            for (a, &i) in members.iter().enumerate() {
                for (b, &j) in members.iter().enumerate().skip(a) {
                    if space.contains(i, j) {
                        entries.push((a, b));
                    }
                }
            }
            (members, entries)
        })
        .collect();
    let largest = local.iter().map(|(_, e)| e.len()).max().unwrap_or(0);
    if largest <= exact_limit {
        let value = local
            .iter()
            .filter(|(_, e)| !e.is_empty())
            .map(|(m, e)| enumerate_vertices(m.len(), e))
            .fold(0.0, f64::max);
        return MuValue {
            value,
            upper: value,
            exact: true,
        };
    }
    let mut rng = rng_from_seed(seed);
    let mut best: f64 = 0.0;
    for (m, e) in local.iter().filter(|(_, e)| !e.is_empty()) {
        best = best.max(search_vertices(m.len(), e, &mut rng));
    }
    let value = best.max(deg_min as f64);
    let upper = deg_max as f64;
    MuValue {
        value,
        upper,
        exact: (upper - value).abs() <= 1e-9 * upper,
    }
}

fn vertex_norm(k: usize, entries: &[(usize, usize)], signs: &[f64]) -> f64 {
    let mut m = DMatrix::<f64>::zeros(k, k);
    for (&(a, b), &s) in entries.iter().zip(signs) {
        m[(a, b)] = s;
        m[(b, a)] = s;
    }
    let ev = m.symmetric_eigenvalues();
    ev.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn enumerate_vertices(k: usize, entries: &[(usize, usize)]) -> f64 {
    let m = entries.len();
    let mut signs = vec![1.0; m];
    let mut best: f64 = 0.0;
    // first sign fixed: N and -N have the same norm
    for code in 0u64..(1u64 << (m - 1)) {
        for (t, s) in signs.iter_mut().enumerate().skip(1) {
            *s = if code >> (t - 1) & 1 == 1 { -1.0 } else { 1.0 };
        }
        best = best.max(vertex_norm(k, entries, &signs));
    }
    best
}

fn search_vertices(k: usize, entries: &[(usize, usize)], rng: &mut ChaCha8Rng) -> f64 {
    let m = entries.len();
    let mut best = vertex_norm(k, entries, &vec![1.0; m]);
    for _ in 0..200 {
        let mut signs: Vec<f64> = (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut cur = vertex_norm(k, entries, &signs);
        // single-flip hill climbing
        let mut improved = true;
        while improved {
            improved = false;
            for t in 0..m {
                signs[t] = -signs[t];
                let v = vertex_norm(k, entries, &signs);
                if v > cur + 1e-12 {
                    cur = v;
                    improved = true;
                } else {
                    signs[t] = -signs[t];
                }
            }
        }
        best = best.max(cur);
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoValue {
    /// Power-iteration estimate of the operator norm of `P_T1 - P_T2` on
    /// symmetric matrices with the Frobenius norm; a lower bound.
    pub value: f64,
    /// Residual `||D^2 N - value^2 N||_F` at the returned iterate.
    pub residual: f64,
    /// `2 ||P_U1 - P_U2||_2`, an upper bound in both the Frobenius and the
    /// spectral operator norm.
    pub certified_upper: f64,
}

pub fn rho(a: &RankTangentSpace, b: &RankTangentSpace, power_iters: usize) -> Result<RhoValue> {
    rho_seeded(a, b, power_iters, 0)
}

pub fn rho_seeded(a: &RankTangentSpace, b: &RankTangentSpace, power_iters: usize, seed: u64) -> Result<RhoValue> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if a.rank() != b.rank() {
        return Err(Error::invalid(format!(
            "tangent spaces have different ranks ({} vs {})",
            a.rank(),
            b.rank()
        )));
    }
    let p = a.dim();
    let apply = |n: &SymMatrix| a.project(n).sub(&b.project(n));
    let certified_upper = 2.0 * a.projector().sub(&b.projector()).spectral_norm();
    let cap = if power_iters == 0 { 10 * p * p } else { power_iters };
    let mut rng = rng_from_seed(seed);
    let mut best = RhoValue {
        value: 0.0,
        residual: 0.0,
        certified_upper,
    };
    for _ in 0..5 {
        let mut n = gaussian_sym(p, &mut rng);
        n = n.scale(1.0 / n.frobenius());
        let mut lam2 = 0.0;
        let mut residual = 0.0;
        for _ in 0..cap {
            let dn = apply(&n);
            let d2n = apply(&dn);
            lam2 = n.inner(&d2n);
            residual = d2n.axpy(-lam2, &n).frobenius();
            let norm = d2n.frobenius();
            if norm < 1e-300 {
                break;
            }
            n = d2n.scale(1.0 / norm);
            if residual <= 1e-8 {
                break;
            }
        }
        let value = lam2.max(0.0).sqrt();
        if value > best.value {
            best.value = value;
            best.residual = residual;
        }
    }
    Ok(best)
}

/// `(f, g)` with `f = gamma ||S||_1 + ||L||_*` and its dual `g = max(||S||_inf / gamma, ||L||_2)`.
pub fn gamma_norms(s: &SymMatrix, l: &SymMatrix, gamma: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    s.check_dim(l)?;
    let f = gamma * s.l1() + l.nuclear_norm();
    let g = (s.max_abs() / gamma).max(l.spectral_norm());
    Ok((f, g))
}

pub fn chi_value(mu: f64, xi: f64, gamma: f64) -> f64 {
    (xi / gamma).max(2.0 * mu * gamma)
}

/// `P_Y A^dag A P_Y (S, L) = (S + P_Omega(L), P_T(S) + L)` for `S in Omega`, `L in T`.
pub fn gram_restricted(
    omega: &SupportSpace,
    t: &RankTangentSpace,
    s: &SymMatrix,
    l: &SymMatrix,
) -> (SymMatrix, SymMatrix) {
    let sum = s.add(l);
    (project_support_unchecked(omega, &sum), t.project(&sum))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdditionGainReport {
    pub chi: f64,
    pub min_gain: f64,
    pub max_gain: f64,
    pub trials: usize,
    /// Every observed gain lies in `[1 - chi, 1 + chi]`.
    pub within_interval: bool,
    /// `chi < 1`, so the interval certifies injectivity.
    pub transverse: bool,
}

/// Samples `(S, L)` in `Omega x T` with `||S||_inf = gamma`, `||L||_2 = 1`
/// and checks that the restricted addition operator keeps `g_gamma` within
/// `[1 - chi, 1 + chi]`.
pub fn addition_gain_check(
    omega: &SupportSpace,
    t: &RankTangentSpace,
    gamma: f64,
    trials: usize,
    seed: u64,
) -> Result<AdditionGainReport> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if omega.dim() != t.dim() {
        return Err(Error::DimensionMismatch {
            expected: omega.dim(),
            found: t.dim(),
        });
    }
    let p = omega.dim();
    let xi = xi_bracket_seeded(t, 4, seed).upper;
    let mu = mu_value_seeded(omega, 22, seed).upper;
    let chi = chi_value(mu, xi, gamma);
    let mut rng = rng_from_seed(seed);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..trials {
        let s = project_support_unchecked(omega, &gaussian_sym(p, &mut rng));
        let s = if s.max_abs() > 0.0 {
            s.scale(gamma / s.max_abs())
        } else {
            s
        };
        let l = t.project(&gaussian_sym(p, &mut rng));
        let l = if l.spectral_norm() > 0.0 {
            l.scale(1.0 / l.spectral_norm())
        } else {
            l
        };
        let (a, b) = gram_restricted(omega, t, &s, &l);
        let (_, g_in) = gamma_norms(&s, &l, gamma)?;
        if g_in == 0.0 {
            continue;
        }
        let (_, g) = gamma_norms(&a, &b, gamma)?;
        let gain = g / g_in;
        lo = lo.min(gain);
        hi = hi.max(gain);
    }
    let tol = 1e-9;
    Ok(AdditionGainReport {
        chi,
        min_gain: lo,
        max_gain: hi,
        trials,
        within_interval: lo >= 1.0 - chi - tol && hi <= 1.0 + chi + tol,
        transverse: chi < 1.0,
    })
}

/// Summary of the identifiability geometry at one `(Omega, T, gamma)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeometryReport {
    pub xi_lower: f64,
    pub xi_upper: f64,
    pub mu_value: f64,
    pub mu_upper: f64,
    pub mu_exact: bool,
    pub inc_value: f64,
    /// Computed from `xi_upper` and `mu_upper`, i.e. the conservative end.
    pub chi_value: f64,
    pub rho_value: Option<f64>,
    pub gamma: f64,
}

pub fn geometry_report(
    omega: &SupportSpace,
    t: &RankTangentSpace,
    gamma: f64,
    other: Option<&RankTangentSpace>,
) -> Result<GeometryReport> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    let xi = xi_bracket(t, 8);
    let mu = mu_value(omega, 22);
    let rho_value = match other {
        Some(o) => Some(rho(t, o, 0)?.value),
        None => None,
    };
    Ok(GeometryReport {
        xi_lower: xi.lower,
        xi_upper: xi.upper,
        mu_value: mu.value,
        mu_upper: mu.upper,
        mu_exact: mu.exact,
        inc_value: xi.inc,
        chi_value: chi_value(mu.upper, xi.upper, gamma),
        rho_value,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(p: usize, cols: &[&[f64]]) -> RankTangentSpace {
        let m = DMatrix::from_fn(p, cols.len(), |i, k| cols[k][i]);
        RankTangentSpace::from_span(&m).unwrap()
    }

    fn e(p: usize, i: usize) -> Vec<f64> {
        (0..p).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
    }

    fn random_space(p: usize, r: usize, seed: u64) -> RankTangentSpace {
        let mut rng = rng_from_seed(seed);
        let m = DMatrix::<f64>::from_fn(p, r, |_, _| rng.sample(StandardNormal));
        RankTangentSpace::from_span(&m).unwrap()
    }

    #[test]
    fn support_projection_examples() {
        let mut rng = rng_from_seed(1);
        let n = gaussian_sym(5, &mut rng);
        assert_eq!(project_support(&SupportSpace::full(5), &n).unwrap(), n);
        assert_eq!(project_support(&SupportSpace::empty(5), &n).unwrap(), SymMatrix::zeros(5));
        let d = project_support(&SupportSpace::diagonal(5), &n).unwrap();
        let diag: Vec<f64> = (0..5).map(|i| n.get(i, i)).collect();
        assert_eq!(d, SymMatrix::from_diagonal(&diag));
        assert!(project_support(&SupportSpace::full(4), &n).is_err());
    }

    #[test]
    fn support_mask_must_be_symmetric() {
        let mut mask = vec![false; 4];
        mask[1] = true;
        assert!(SupportSpace::new(2, mask).is_err());
        assert!(SupportSpace::new(2, vec![true; 3]).is_err());
    }

    #[test]
    fn tangent_projection_examples() {
        let t = basis(3, &[&e(3, 0)]);
        let mut n = SymMatrix::zeros(3);
        n.set(1, 1, 1.0);
        assert_eq!(project_tangent(&t, &n, false).unwrap(), SymMatrix::zeros(3));
        assert_eq!(project_tangent(&t, &n, true).unwrap(), n);

        let t = random_space(7, 2, 4);
        let mut rng = rng_from_seed(2);
        let x = gaussian_sym(7, &mut rng);
        let px = project_tangent(&t, &x, false).unwrap();
        let ppx = project_tangent(&t, &px, false).unwrap();
        assert!(px.sub(&ppx).max_abs() < 1e-12);
        let q = project_tangent(&t, &x, true).unwrap();
        assert!(px.add(&q).sub(&x).max_abs() < 1e-12);
        // matches the dense projector formula
        let pu = t.projector();
        let dense = SymMatrix::symmetrized(
            pu.as_matrix() * x.as_matrix() + x.as_matrix() * pu.as_matrix()
                - pu.as_matrix() * x.as_matrix() * pu.as_matrix(),
        );
        assert!(dense.sub(&px).max_abs() < 1e-12);
    }

    #[test]
    fn incoherence_examples() {
        assert_eq!(basis(4, &[&e(4, 0)]).incoherence(), 1.0);
        for p in [4, 9, 16] {
            let flat = vec![1.0 / (p as f64).sqrt(); p];
            let inc = basis(p, &[&flat]).incoherence();
            assert!((inc - (1.0 / p as f64).sqrt()).abs() < 1e-12);
        }
        // 4x4 Hadamard, two columns: every leverage is exactly 1/2
        let h1 = [0.5, 0.5, 0.5, 0.5];
        let h2 = [0.5, -0.5, 0.5, -0.5];
        let inc = basis(4, &[&h1, &h2]).incoherence();
        assert!((inc - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn diagonal_witness_closed_form() {
        assert_eq!(diagonal_witness(1.0), 1.0);
        assert_eq!(diagonal_witness(0.0), 0.0);
        assert_eq!(diagonal_witness(0.5f64.sqrt()), 1.0);
        assert!((diagonal_witness(0.5) - 0.75f64.sqrt()).abs() < 1e-15);
        for k in 0..=100 {
            let a = k as f64 / 100.0;
            assert!(diagonal_witness(a) >= a - 1e-15);
        }
    }

    #[test]
    fn diagonal_witness_is_attained() {
        // rank one in R^2: u = (a, b); the witness matrix lives in the plane
        let a: f64 = 0.4;
        let b = (1.0 - a * a).sqrt();
        let t = basis(2, &[&[a, b]]);
        let u = DMatrix::from_column_slice(2, 1, &[a, b]);
        let w = DMatrix::from_column_slice(2, 1, &[b, -a]);
        // N = (uw^T + wu^T) has unit norm and N_00 = 2ab
        let n = SymMatrix::symmetrized(&u * w.transpose() + &w * u.transpose());
        assert!(project_tangent(&t, &n, false).unwrap().sub(&n).max_abs() < 1e-12);
        assert!((n.spectral_norm() - 1.0).abs() < 1e-12);
        assert!((n.get(0, 0) - diagonal_witness(a)).abs() < 1e-12);
    }

    #[test]
    fn xi_coordinate_aligned() {
        let t = basis(5, &[&e(5, 2)]);
        let b = xi_bracket(&t, 4);
        assert!((b.inc - 1.0).abs() < 1e-12);
        assert!((b.lower - 1.0).abs() < 1e-12);
        assert!((b.upper - 2.0).abs() < 1e-12);
    }

    #[test]
    fn xi_flat_hadamard() {
        let t = basis(4, &[&[0.5, 0.5, 0.5, 0.5]]);
        let b = xi_bracket(&t, 4);
        assert!((b.inc - 0.5).abs() < 1e-12);
        assert!(b.lower >= 0.5 && b.upper <= 1.0 + 1e-12);
    }

    #[test]
    fn xi_zero_rank() {
        let t = RankTangentSpace::from_matrix(&SymMatrix::zeros(4), 1e-12);
        assert_eq!(t.rank(), 0);
        let b = xi_bracket(&t, 4);
        assert_eq!((b.lower, b.upper), (0.0, 0.0));
    }

    #[test]
    fn xi_bracket_contains_monte_carlo() {
        let t = random_space(8, 2, 11);
        let b = xi_bracket(&t, 8);
        let mc = xi_monte_carlo(&t, 100_000, 5);
        assert!(b.lower <= b.upper);
        assert!(mc <= b.upper + 1e-12);
        let estimate = mc.max(b.lower);
        assert!(estimate >= b.inc && estimate <= 2.0 * b.inc + 1e-12);
        // the ascent should beat random sampling
        assert!(b.lower >= mc - 1e-9, "lower {} mc {}", b.lower, mc);
    }

    #[test]
    fn mu_examples() {
        let d = mu_value(&SupportSpace::diagonal(6), 22);
        assert!(d.exact);
        assert!((d.value - 1.0).abs() < 1e-12);
        for p in [3, 5, 8] {
            let f = mu_value(&SupportSpace::full(p), 22);
            assert!((f.value - p as f64).abs() < 1e-9, "{f:?}");
        }
        let z = mu_value(&SupportSpace::empty(3), 22);
        assert_eq!(z.value, 0.0);
    }

    #[test]
    fn mu_cycle_is_three_regular() {
        // a long cycle is too big to enumerate but is degree-regular
        let p = 36;
        let mut mask = vec![false; p * p];
        for i in 0..p {
            for j in [i, (i + 1) % p, (i + p - 1) % p] {
                mask[i * p + j] = true;
            }
        }
        let m = mu_value(&SupportSpace::new(p, mask).unwrap(), 22);
        assert!((m.value - 3.0).abs() < 1e-9);
        assert_eq!(m.upper, 3.0);
        assert!(m.exact);
    }

    #[test]
    fn mu_enumeration_matches_random_vertices() {
        // 10 independent entries: a 4-cycle with diagonal plus one chord pair
        let p = 5;
        let entries = [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (0, 1), (1, 2), (2, 3), (3, 0), (2, 4)];
        let mut mask = vec![false; p * p];
        for &(i, j) in &entries {
            mask[i * p + j] = true;
            mask[j * p + i] = true;
        }
        let space = SupportSpace::new(p, mask).unwrap();
        assert_eq!(space.free_entries().len(), 10);
        let exact = mu_value(&space, 22);
        assert!(exact.exact);
        let mut rng = rng_from_seed(3);
        let mut best: f64 = 0.0;
        for _ in 0..10_000 {
            let signs: Vec<f64> = (0..10).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            best = best.max(vertex_norm(p, &entries, &signs));
        }
        assert!((exact.value - best).abs() < 1e-9);
        let (dmax, dmin) = space.degree_range();
        assert!(exact.value >= dmin as f64 - 1e-9 && exact.value <= dmax as f64 + 1e-9);
    }

    #[test]
    fn rho_examples() {
        let a = basis(2, &[&e(2, 0)]);
        let b = basis(2, &[&e(2, 1)]);
        let r = rho(&a, &b, 200).unwrap();
        assert!((r.value - 1.0).abs() < 1e-9, "{r:?}");
        let z = rho(&a, &a, 200).unwrap();
        assert!(z.value < 1e-12);
        let c = basis(3, &[&e(3, 0), &e(3, 1)]);
        assert!(rho(&a, &c, 10).is_err());
        let d = basis(3, &[&e(3, 0)]);
        assert!(rho(&c, &d, 10).is_err());
    }

    #[test]
    fn rho_matches_dense_operator() {
        // p = 2: symmetric matrices have orthonormal basis E11, E22, (E12+E21)/sqrt2
        let a = basis(2, &[&e(2, 0)]);
        let b = basis(2, &[&e(2, 1)]);
        let s2 = 0.5f64.sqrt();
        let elems = [
            SymMatrix::from_row_major(2, &[1.0, 0.0, 0.0, 0.0]).unwrap(),
            SymMatrix::from_row_major(2, &[0.0, 0.0, 0.0, 1.0]).unwrap(),
            SymMatrix::from_row_major(2, &[0.0, s2, s2, 0.0]).unwrap(),
        ];
        let op = DMatrix::from_fn(3, 3, |i, j| {
            let img = a.project(&elems[j]).sub(&b.project(&elems[j]));
            elems[i].inner(&img)
        });
        let sv = op.singular_values().max();
        assert!((sv - 1.0).abs() < 1e-12);
        assert!((rho(&a, &b, 200).unwrap().value - sv).abs() < 1e-9);
    }

    #[test]
    fn gamma_norm_examples() {
        assert_eq!(gamma_norms(&SymMatrix::zeros(2), &SymMatrix::zeros(2), 0.7).unwrap(), (0.0, 0.0));
        assert_eq!(gamma_norms(&SymMatrix::identity(2), &SymMatrix::zeros(2), 1.0).unwrap(), (2.0, 1.0));
        assert!(gamma_norms(&SymMatrix::identity(2), &SymMatrix::zeros(2), 0.0).is_err());
    }

    #[test]
    fn chi_examples() {
        assert_eq!(chi_value(1.0, 0.5, 0.5), 1.0);
        assert_eq!(chi_value(0.0, 0.0, 3.0), 0.0);
        let (mu, xi) = (1.5, 0.2);
        assert!(mu * xi < 0.5);
        for k in 1..20 {
            let g = xi + (0.5 / mu - xi) * k as f64 / 20.0;
            assert!(chi_value(mu, xi, g) < 1.0);
        }
    }

    #[test]
    fn addition_gain_with_zero_low_rank_part() {
        let omega = SupportSpace::diagonal(4);
        let t = basis(4, &[&e(4, 0)]);
        let s = SymMatrix::from_diagonal(&[0.3, -0.1, 0.2, 0.0]);
        let (a, b) = gram_restricted(&omega, &t, &s, &SymMatrix::zeros(4));
        assert_eq!(a, s);
        assert!((b.max_abs() - 0.3).abs() < 1e-15);
        let (_, g) = gamma_norms(&a, &SymMatrix::zeros(4), 0.3).unwrap();
        assert!((g - 1.0).abs() < 1e-15);
    }

    #[test]
    fn addition_gain_on_transverse_pair() {
        // diagonal support and a flat rank-one space are far apart
        let p = 64;
        let omega = SupportSpace::diagonal(p);
        let t = basis(p, &[&vec![0.125; p]]);
        let gamma = 0.35;
        let report = addition_gain_check(&omega, &t, gamma, 1000, 9).unwrap();
        assert!(report.transverse, "{report:?}");
        assert!(report.within_interval, "{report:?}");
    }

    #[test]
    fn addition_gain_vacuous_when_chi_large() {
        let omega = SupportSpace::full(3);
        let t = basis(3, &[&e(3, 0)]);
        let report = addition_gain_check(&omega, &t, 1.0, 50, 1).unwrap();
        assert!(!report.transverse);
        assert!(1.0 - report.chi <= 0.0);
    }

    #[test]
    fn report_serializes() {
        let omega = SupportSpace::diagonal(4);
        let t = basis(4, &[&[0.5, 0.5, 0.5, 0.5]]);
        let r = geometry_report(&omega, &t, 0.8, Some(&basis(4, &[&e(4, 0)]))).unwrap();
        assert!(r.xi_lower <= r.xi_upper);
        assert!(r.mu_exact);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"mu_exact\":true"));
    }
}
