//! Dense symmetric matrices and the spectral primitives built on them.
//!
//! Everything downstream works with [`SymMatrix`], a thin newtype over a
//! square `nalgebra::DMatrix<f64>` that is exactly symmetric. The eigensolver
//! is nalgebra's tridiagonal QR (`SymmetricEigen`); this module only adds the
//! ordering convention (descending) and the input checks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A real symmetric `p x p` matrix with `p >= 1`.
///
/// Construction symmetrizes the input as `(A + A^T) / 2`, so the stored
/// entries satisfy `a[i][j] == a[j][i]` bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    inner: DMatrix<f64>,
}

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if m.nrows() == 0 {
            return Err(Error::invalid("symmetric matrix must have dimension >= 1"));
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrizes a square matrix. Panics if `m` is not square.
    pub(crate) fn symmetrized(mut m: DMatrix<f64>) -> Self {
        let p = m.nrows();
        assert_eq!(p, m.ncols(), "symmetrized: matrix must be square");
        for i in 0..p {
            for j in (i + 1)..p {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self { inner: m }
    }

    pub fn from_fn(p: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self::symmetrized(DMatrix::from_fn(p, p, f))
    }

    pub fn from_row_major(p: usize, data: &[f64]) -> Result<Self> {
        if data.len() != p * p {
            return Err(Error::DimensionMismatch {
                expected: p * p,
                found: data.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(p, p, data))
    }

    pub fn identity(p: usize) -> Self {
        Self {
            inner: DMatrix::identity(p, p),
        }
    }

    pub fn zeros(p: usize) -> Self {
        Self {
            inner: DMatrix::zeros(p, p),
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self {
            inner: DMatrix::from_diagonal(&DVector::from_column_slice(d)),
        }
    }

    /// `sum_k w_k v_k v_k^T` for the columns `v_k` of `vectors`.
    pub fn from_spectrum(vectors: &DMatrix<f64>, values: &[f64]) -> Self {
        let mut scaled = vectors.clone();
        for (k, &w) in values.iter().enumerate() {
            scaled.column_mut(k).scale_mut(w);
        }
        Self::symmetrized(&scaled * vectors.transpose())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.inner[(i, j)] = v;
        self.inner[(j, i)] = v;
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let p = self.dim();
        let mut out = Vec::with_capacity(p * p);
        for i in 0..p {
            for j in 0..p {
                out.push(self.inner[(i, j)]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.inner.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_dim(&self, other: &SymMatrix) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        Self {
            inner: &self.inner + &other.inner,
        }
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        Self {
            inner: &self.inner - &other.inner,
        }
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        Self {
            inner: &self.inner * s,
        }
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &SymMatrix) -> SymMatrix {
        Self {
            inner: &self.inner + &other.inner * s,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        Self {
            inner: self.inner.map(f),
        }
    }

    /// `B * self * B^T`, symmetric by construction.
    pub fn congruence(&self, b: &DMatrix<f64>) -> SymMatrix {
        Self::symmetrized(b * &self.inner * b.transpose())
    }

    pub fn trace(&self) -> f64 {
        self.inner.trace()
    }

    /// Trace inner product `<A, B> = tr(A B)`.
    pub fn inner(&self, other: &SymMatrix) -> f64 {
        self.inner.dot(&other.inner)
    }

    pub fn frobenius(&self) -> f64 {
        self.inner.norm()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.inner.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Sum of absolute entries (the entrywise l1 norm).
    pub fn l1(&self) -> f64 {
        self.inner.iter().map(|v| v.abs()).sum()
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut values: Vec<f64> = self.inner.clone().symmetric_eigenvalues().iter().copied().collect();
        values.sort_by(|a, b| b.total_cmp(a));
        values
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().last().copied().unwrap_or(0.0)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Spectral norm, the largest eigenvalue magnitude.
    pub fn spectral_norm(&self) -> f64 {
        let values = self.eigenvalues();
        match (values.first(), values.last()) {
            (Some(a), Some(b)) => a.abs().max(b.abs()),
            _ => 0.0,
        }
    }

    /// Nuclear norm, the sum of eigenvalue magnitudes.
    pub fn nuclear_norm(&self) -> f64 {
        self.eigenvalues().iter().map(|v| v.abs()).sum()
    }

    /// Number of eigenvalues with magnitude above `tol`.
    pub fn rank(&self, tol: f64) -> usize {
        self.eigenvalues().iter().filter(|v| v.abs() > tol).count()
    }

    /// Principal submatrix on `idx`.
    pub fn submatrix(&self, idx: &[usize]) -> SymMatrix {
        Self {
            inner: DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.inner[(idx[a], idx[b])]),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SymMatrixRepr {
    dim: usize,
    data: Vec<f64>,
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        SymMatrixRepr {
            dim: self.dim(),
            data: self.to_row_major(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = SymMatrixRepr::deserialize(deserializer)?;
        SymMatrix::from_row_major(repr.dim, &repr.data).map_err(serde::de::Error::custom)
    }
}

/// Full spectral decomposition with eigenvalues sorted in descending order.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in the order of `values`.
    pub vectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> SymMatrix {
        SymMatrix::from_spectrum(&self.vectors, &self.values)
    }

    /// Rebuilds the matrix after mapping each eigenvalue through `f`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let mapped: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        SymMatrix::from_spectrum(&self.vectors, &mapped)
    }

    /// Eigenvectors whose eigenvalues exceed `tol`, as the columns of a `p x r` matrix.
    pub fn leading_vectors(&self, tol: f64) -> DMatrix<f64> {
        let r = self.values.iter().take_while(|&&v| v > tol).count();
        self.vectors.columns(0, r).into_owned()
    }
}

pub fn sym_eig(a: &SymMatrix) -> Result<EigenDecomposition> {
    if !a.is_finite() {
        return Err(Error::invalid("sym_eig: matrix has non-finite entries"));
    }
    Ok(sym_eig_unchecked(a))
}

pub(crate) fn sym_eig_unchecked(a: &SymMatrix) -> EigenDecomposition {
    let SymmetricEigen {
        eigenvectors,
        eigenvalues,
    } = SymmetricEigen::new(a.as_matrix().clone());
    let p = a.dim();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| eigenvalues[y].total_cmp(&eigenvalues[x]));
    let values = order.iter().map(|&k| eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(p, p, |i, c| eigenvectors[(i, order[c])]);
    EigenDecomposition { values, vectors }
}

/// Default singularity threshold for [`psd_inverse`]: `1e-12 * ||A||_2`.
pub fn default_inverse_eps(a: &SymMatrix) -> f64 {
    1e-12 * a.spectral_norm()
}

/// Inverse of a positive definite matrix through its spectral decomposition.
///
/// Fails with `NotPositiveDefinite` when the smallest eigenvalue is not above `eps`.
pub fn psd_inverse(a: &SymMatrix, eps: f64) -> Result<SymMatrix> {
    let eig = sym_eig(a)?;
    let min = *eig.values.last().expect("dim >= 1");
    if !(min > eps) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    Ok(eig.map_spectrum(|v| 1.0 / v))
}

/// [`psd_inverse`] with the default threshold.
pub fn inverse(a: &SymMatrix) -> Result<SymMatrix> {
    psd_inverse(a, default_inverse_eps(a))
}

/// `log det A` for a positive definite `A`.
pub fn logdet(a: &SymMatrix) -> Result<f64> {
    let values = a.eigenvalues();
    let min = *values.last().expect("dim >= 1");
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    Ok(values.iter().map(|v| v.ln()).sum())
}

/// Spectral square root factor `F` with `F F^T = A`.
///
/// Eigenvalues within roundoff of zero are clipped, so semidefinite inputs
/// are accepted; genuinely indefinite inputs are rejected.
pub fn sqrt_factor(a: &SymMatrix) -> Result<DMatrix<f64>> {
    let eig = sym_eig(a)?;
    let min = *eig.values.last().expect("dim >= 1");
    let scale = eig.values.first().map(|v| v.abs()).unwrap_or(0.0).max(min.abs());
    if min < -1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    let mut f = eig.vectors.clone();
    for (k, &v) in eig.values.iter().enumerate() {
        f.column_mut(k).scale_mut(v.max(0.0).sqrt());
    }
    Ok(f)
}

pub(crate) fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` independent draws from `N(0, covariance)` as the rows of an `n x p` matrix.
pub fn mvn_sample(covariance: &SymMatrix, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let factor = sqrt_factor(covariance)?;
    let mut rng = rng_from_seed(seed);
    Ok(gaussian_rows(&factor, n, &mut rng))
}

pub(crate) fn gaussian_rows(factor: &DMatrix<f64>, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let p = factor.nrows();
    let z = DMatrix::<f64>::from_fn(n, p, |_, _| StandardNormal.sample(rng));
    z * factor.transpose()
}

/// Empirical second moment `(1/n) sum x x^T` of the rows of `x`.
pub fn second_moment(x: &DMatrix<f64>) -> Result<SymMatrix> {
    if x.nrows() == 0 {
        return Err(Error::invalid("second moment of an empty sample set"));
    }
    let g = x.transpose() * x / (x.nrows() as f64);
    SymMatrix::new(g)
}
