//! Ground-truth latent-variable Gaussian models.
//!
//! A model is a joint concentration matrix over observed and hidden
//! variables. Marginalizing out the hidden block gives the observed
//! concentration as a Schur complement `K_O - K_OH K_H^{-1} K_HO`, i.e. a
//! sparse conditional part minus a low-rank, positive semidefinite part.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RankTangentSpace;
use crate::matrix::{self, rng_from_seed, SymMatrix};

/// Minimum eigenvalue the joint concentration must reach after loading.
const PD_MARGIN: f64 = 0.1;
const LOADING_START: f64 = 0.05;
const LOADING_CAP: f64 = 1e8;
const MAX_REDRAWS: usize = 100;
const SAMPLE_CHUNK: usize = 8192;

/// Generator recipe for a synthetic model; stored with the model so runs can be replayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Cycle {
        p: usize,
        h: usize,
        edge_pc: f64,
        latent_frac: f64,
        /// `None` calibrates the scale so that `||L||_2 ~ ||S||_2 / 2`.
        #[serde(default)]
        latent_scale: Option<f64>,
    },
    Grid {
        rows: usize,
        cols: usize,
        h: usize,
        edge_pc: f64,
        latent_frac: f64,
        #[serde(default)]
        latent_scale: Option<f64>,
    },
}

impl GeneratorSpec {
    pub fn build(&self, seed: u64) -> Result<LatentVariableModel> {
        match *self {
            GeneratorSpec::Cycle {
                p,
                h,
                edge_pc,
                latent_frac,
                latent_scale,
            } => build_cycle_model(p, h, edge_pc, latent_frac, latent_scale, seed),
            GeneratorSpec::Grid {
                rows,
                cols,
                h,
                edge_pc,
                latent_frac,
                latent_scale,
            } => build_grid_model(rows, cols, h, edge_pc, latent_frac, latent_scale, seed),
        }
    }
}

/// Joint concentration matrix over observed and hidden variables.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVariableModel {
    k_full: SymMatrix,
    observed: Vec<usize>,
    hidden: Vec<usize>,
    seed: Option<u64>,
    generator: Option<GeneratorSpec>,
}

impl LatentVariableModel {
    /// Validates that `k_full` is positive definite and that the index sets
    /// partition `0..dim`.
    pub fn new(k_full: SymMatrix, observed: Vec<usize>, hidden: Vec<usize>) -> Result<Self> {
        let dim = k_full.dim();
        if observed.is_empty() {
            return Err(Error::invalid("model needs at least one observed variable"));
        }
        let mut seen = vec![false; dim];
        for &i in observed.iter().chain(hidden.iter()) {
            if i >= dim {
                return Err(Error::invalid(format!("index {i} out of range for dimension {dim}")));
            }
            if seen[i] {
                return Err(Error::invalid(format!("index {i} appears twice")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("observed and hidden index sets must cover all variables"));
        }
        let min = k_full.min_eigenvalue();
        if !(min > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
        }
        Ok(Self {
            k_full,
            observed,
            hidden,
            seed: None,
            generator: None,
        })
    }

    pub fn p(&self) -> usize {
        self.observed.len()
    }

    pub fn h(&self) -> usize {
        self.hidden.len()
    }

    pub fn k_full(&self) -> &SymMatrix {
        &self.k_full
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn generator(&self) -> Option<&GeneratorSpec> {
        self.generator.as_ref()
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            dimension: self.k_full.dim(),
            observed: self.observed.clone(),
            hidden: self.hidden.clone(),
            k_full: self.k_full.to_row_major(),
            seed: self.seed,
            generator: self.generator.clone(),
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        let k = SymMatrix::from_row_major(doc.dimension, &doc.k_full)?;
        let mut model = Self::new(k, doc.observed, doc.hidden)?;
        model.seed = doc.seed;
        model.generator = doc.generator;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }
}

/// On-disk form of a model: dense joint concentration in row-major order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDocument {
    pub dimension: usize,
    pub observed: Vec<usize>,
    pub hidden: Vec<usize>,
    pub k_full: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
}

/// Sparse-minus-low-rank view of the observed marginal.
#[derive(Clone, Debug)]
pub struct MarginalDecomposition {
    /// Conditional concentration of the observed variables, `K_O`.
    pub s_true: SymMatrix,
    /// Effect of the hidden variables, `K_OH K_H^{-1} K_HO`.
    pub l_true: SymMatrix,
    /// Marginal concentration `S - L`.
    pub k_marg: SymMatrix,
    /// Marginal covariance, the inverse of `k_marg`.
    pub sigma_marg: SymMatrix,
}

impl MarginalDecomposition {
    pub fn p(&self) -> usize {
        self.s_true.dim()
    }

    /// Rank of `l_true` at a tolerance relative to its spectral norm.
    pub fn latent_rank(&self) -> usize {
        let tol = 1e-9 * self.l_true.spectral_norm().max(1.0);
        self.l_true.rank(tol)
    }

    pub fn sample_covariance(&self, n: usize, seed: u64) -> Result<SampleCovariance> {
        sample_covariance_from(&self.sigma_marg, n, seed)
    }
}

/// `Sigma^n = (1/n) sum x_i x_i^T` together with its sample count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleCovariance {
    pub p: usize,
    pub n: usize,
    pub sigma_n: SymMatrix,
}

impl SampleCovariance {
    pub fn new(sigma_n: SymMatrix, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("sample covariance needs n >= 1"));
        }
        let scale = sigma_n.spectral_norm().max(1.0);
        let min = sigma_n.min_eigenvalue();
        if min < -1e-10 * scale {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
        }
        Ok(Self {
            p: sigma_n.dim(),
            n,
            sigma_n,
        })
    }
}

/// Complexity summary of a latent-variable model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelComplexity {
    /// Largest number of nonzeros in a row of `S`, diagonal included.
    pub deg_max: usize,
    pub deg_min: usize,
    /// `max_i ||P_U e_i||` over the column space of `L`; 0 when `L = 0`.
    pub inc: f64,
    pub rank: usize,
    /// Smallest nonzero eigenvalue of `L`; 0 when `L = 0`.
    pub sigma_min: f64,
    /// Smallest nonzero entry magnitude of `S`.
    pub theta_min: f64,
    /// `||Sigma_O||_2`.
    pub psi: f64,
}

fn check_common(h: usize, edge_pc: f64, latent_frac: f64, latent_scale: Option<f64>) -> Result<()> {
    if !(edge_pc.abs() > 0.0 && edge_pc.abs() < 1.0) {
        return Err(Error::invalid(format!("edge partial correlation {edge_pc} must satisfy 0 < |pc| < 1")));
    }
    if h > 0 && !(latent_frac > 0.0 && latent_frac <= 1.0) {
        return Err(Error::invalid(format!("latent fraction {latent_frac} must lie in (0, 1]")));
    }
    if let Some(s) = latent_scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("latent scale {s} must be positive")));
        }
    }
    Ok(())
}

pub fn build_cycle_model(
    p: usize,
    h: usize,
    edge_pc: f64,
    latent_frac: f64,
    latent_scale: Option<f64>,
    seed: u64,
) -> Result<LatentVariableModel> {
    if p < 3 {
        return Err(Error::invalid("cycle model needs p >= 3"));
    }
    check_common(h, edge_pc, latent_frac, latent_scale)?;
    let edges: Vec<(usize, usize)> = (0..p).map(|i| (i, (i + 1) % p)).collect();
    let mut model = assemble(p, h, &edges, edge_pc, latent_frac, latent_scale, seed)?;
    model.seed = Some(seed);
    model.generator = Some(GeneratorSpec::Cycle {
        p,
        h,
        edge_pc,
        latent_frac,
        latent_scale,
    });
    Ok(model)
}

pub fn build_grid_model(
    rows: usize,
    cols: usize,
    h: usize,
    edge_pc: f64,
    latent_frac: f64,
    latent_scale: Option<f64>,
    seed: u64,
) -> Result<LatentVariableModel> {
    if rows * cols < 4 {
        return Err(Error::invalid("grid model needs rows * cols >= 4"));
    }
    check_common(h, edge_pc, latent_frac, latent_scale)?;
    let at = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((at(r, c), at(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((at(r, c), at(r + 1, c)));
            }
        }
    }
    let mut model = assemble(rows * cols, h, &edges, edge_pc, latent_frac, latent_scale, seed)?;
    model.seed = Some(seed);
    model.generator = Some(GeneratorSpec::Grid {
        rows,
        cols,
        h,
        edge_pc,
        latent_frac,
        latent_scale,
    });
    Ok(model)
}

/// Places the conditional graph and the latent couplings, then loads the
/// hidden block until the joint matrix is comfortably positive definite.
///
/// Only the hidden diagonal is loaded, and the hidden variables are then
/// rescaled to unit diagonal. Neither step touches `K_O`, so the conditional
/// partial correlations stay exactly at `edge_pc`.
fn assemble(
    p: usize,
    h: usize,
    edges: &[(usize, usize)],
    edge_pc: f64,
    latent_frac: f64,
    latent_scale: Option<f64>,
    seed: u64,
) -> Result<LatentVariableModel> {
    let mut k_o = SymMatrix::identity(p);
    for &(i, j) in edges {
        // -pc * sqrt(K_ii K_jj) with unit diagonal
        k_o.set(i, j, -edge_pc);
    }
    let min_o = k_o.min_eigenvalue();
    if min_o < PD_MARGIN {
        return Err(Error::ModelConstructionFailed(format!(
            "conditional block has smallest eigenvalue {min_o:.4} < {PD_MARGIN}; reduce |edge_pc|"
        )));
    }

    let observed: Vec<usize> = (0..p).collect();
    let hidden: Vec<usize> = (p..p + h).collect();
    if h == 0 {
        return LatentVariableModel::new(k_o, observed, hidden);
    }

    let mut rng = rng_from_seed(seed);
    let fan_out = ((latent_frac * p as f64).round() as usize).clamp(1, p);
    let coupling = draw_coupling(p, h, fan_out, &mut rng)?;
    let scale = match latent_scale {
        Some(s) => s,
        None => {
            let unit = SymMatrix::symmetrized(&coupling * coupling.transpose());
            (k_o.spectral_norm() / (2.0 * unit.spectral_norm())).sqrt()
        }
    };
    let coupling = coupling * scale;

    let build = |load: f64| {
        SymMatrix::from_fn(p + h, |i, j| match (i < p, j < p) {
            (true, true) => k_o.get(i, j),
            (true, false) => coupling[(i, j - p)],
            (false, true) => coupling[(j, i - p)],
            (false, false) => {
                if i == j {
                    1.0 + load
                } else {
                    0.0
                }
            }
        })
    };

    let mut load = 0.0;
    let mut k_full = build(load);
    while k_full.min_eigenvalue() < PD_MARGIN {
        load = if load == 0.0 { LOADING_START } else { 2.0 * load };
        if load > LOADING_CAP {
            return Err(Error::ModelConstructionFailed(
                "joint concentration did not become positive definite within the loading cap".into(),
            ));
        }
        k_full = build(load);
    }

    // Unit hidden diagonal; a rescaling of hidden variables leaves L unchanged.
    let d: Vec<f64> = (0..p + h)
        .map(|i| if i < p { 1.0 } else { 1.0 / (1.0 + load).sqrt() })
        .collect();
    let k_full = SymMatrix::from_fn(p + h, |i, j| k_full.get(i, j) * d[i] * d[j]);
    LatentVariableModel::new(k_full, observed, hidden)
}

/// Random `p x h` coupling: each hidden variable touches `fan_out` observed
/// variables with coefficients uniform on `[-1, 1]`. Redraws until the
/// coupling has full column rank.
fn draw_coupling(p: usize, h: usize, fan_out: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    for _ in 0..MAX_REDRAWS {
        let mut b = DMatrix::zeros(p, h);
        for k in 0..h {
            for i in index::sample(rng, p, fan_out).into_iter() {
                b[(i, k)] = rng.random_range(-1.0..=1.0);
            }
        }
        let gram = SymMatrix::symmetrized(b.transpose() * &b);
        let values = gram.eigenvalues();
        let (top, bottom) = (values[0], values[h - 1]);
        if top > 0.0 && bottom > 1e-6 * top {
            return Ok(b);
        }
    }
    Err(Error::ModelConstructionFailed(format!(
        "could not draw a rank-{h} latent coupling with fan-out {fan_out}"
    )))
}

pub fn marginalize(model: &LatentVariableModel) -> Result<MarginalDecomposition> {
    let k = model.k_full();
    let s_true = k.submatrix(model.observed());
    let p = model.p();
    let l_true = if model.h() == 0 {
        SymMatrix::zeros(p)
    } else {
        let k_h = k.submatrix(model.hidden());
        let k_h_inv = matrix::psd_inverse(&k_h, matrix::default_inverse_eps(&k_h))?;
        let k_oh = DMatrix::from_fn(p, model.h(), |a, b| k.get(model.observed()[a], model.hidden()[b]));
        k_h_inv.congruence(&k_oh)
    };
    let k_marg = s_true.sub(&l_true);
    let sigma_marg = matrix::inverse(&k_marg)?;
    Ok(MarginalDecomposition {
        s_true,
        l_true,
        k_marg,
        sigma_marg,
    })
}

pub fn sample_covariance(model: &LatentVariableModel, n: usize, seed: u64) -> Result<SampleCovariance> {
    marginalize(model)?.sample_covariance(n, seed)
}

/// Draws `n` samples from `N(0, sigma)` and returns their second moment.
///
/// Samples are generated and accumulated in fixed-size chunks, so memory
/// stays bounded for large `n` and the result is a pure function of `seed`.
pub fn sample_covariance_from(sigma: &SymMatrix, n: usize, seed: u64) -> Result<SampleCovariance> {
    if n == 0 {
        return Err(Error::invalid("sample covariance needs n >= 1"));
    }
    let factor = matrix::sqrt_factor(sigma)?;
    let mut rng = rng_from_seed(seed);
    let p = sigma.dim();
    let mut acc = DMatrix::<f64>::zeros(p, p);
    let mut remaining = n;
    while remaining > 0 {
        let m = remaining.min(SAMPLE_CHUNK);
        let x = matrix::gaussian_rows(&factor, m, &mut rng);
        acc.gemm_tr(1.0, &x, &x, 1.0);
        remaining -= m;
    }
    SampleCovariance::new(SymMatrix::symmetrized(acc / n as f64), n)
}

/// Row nonzero counts of `s` (diagonal included) at threshold `tol`.
pub fn degree_range(s: &SymMatrix, tol: f64) -> (usize, usize) {
    let p = s.dim();
    let counts: Vec<usize> = (0..p)
        .map(|i| (0..p).filter(|&j| s.get(i, j).abs() > tol).count())
        .collect();
    (
        counts.iter().copied().max().unwrap_or(0),
        counts.iter().copied().min().unwrap_or(0),
    )
}

pub fn model_complexity(decomp: &MarginalDecomposition, support_tol: f64) -> ModelComplexity {
    let s = &decomp.s_true;
    let (deg_max, deg_min) = degree_range(s, support_tol);
    let theta_min = s
        .as_matrix()
        .iter()
        .map(|v| v.abs())
        .filter(|&v| v > support_tol)
        .fold(f64::INFINITY, f64::min);
    let rank_tol = 1e-9 * decomp.l_true.spectral_norm().max(1.0);
    let values = decomp.l_true.eigenvalues();
    let nonzero: Vec<f64> = values.iter().copied().filter(|&v| v > rank_tol).collect();
    let space = RankTangentSpace::from_matrix(&decomp.l_true, rank_tol);
    ModelComplexity {
        deg_max,
        deg_min,
        inc: space.incoherence(),
        rank: nonzero.len(),
        sigma_min: nonzero.last().copied().unwrap_or(0.0),
        theta_min: if theta_min.is_finite() { theta_min } else { 0.0 },
        psi: decomp.sigma_marg.spectral_norm(),
    }
}
