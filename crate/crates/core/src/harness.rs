//! Experiment orchestration, CSV ingestion and the command entry points
//! used by the `lvggm` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::warn;
use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{verdict, ConsistencyVerdict};
use crate::error::{Error, Result};
use crate::fisher::{diagnostics, FisherDiagnostics, FisherOperator, DEFAULT_NEARBY_SAMPLES};
use crate::geometry::{
    geometry_report, mu_value, xi_bracket, GeometryReport, RankTangentSpace, SupportSpace,
};
use crate::lvmodel::{
    marginalize, model_complexity, GeneratorSpec, LatentVariableModel, MarginalDecomposition, ModelComplexity,
    SampleCovariance,
};
use crate::matrix::{self, SymMatrix};
use crate::solver::{fit, gamma_sweep, lambda_schedule, DecompositionEstimate, SolverConfig, StabilityReport};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "LVGGM_THREADS";

/// Support threshold used when reading the structure of a supplied `S`.
const MATRIX_SUPPORT_TOL: f64 = 1e-10;
const ASYMMETRY_TOL: f64 = 1e-8;
const MU_EXACT_LIMIT: usize = 22;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub generator: GeneratorSpec,
    pub seed: u64,
}

/// `lambda = scale * sqrt(p / n) / xi_hint`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRule {
    pub scale: f64,
    #[serde(default)]
    pub xi_hint: Option<f64>,
}

/// Either one `gamma` for every fit or an ascending grid; with a grid each
/// trial keeps the recommended point of its stability sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSetting {
    Fixed(f64),
    Sweep(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub curve_csv: PathBuf,
    pub summary_json: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            curve_csv: PathBuf::from("curve.csv"),
            summary_json: PathBuf::from("summary.json"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Free-form label copied into the summary.
    #[serde(default)]
    pub label: String,
    pub model: ModelSpec,
    pub n_grid: Vec<usize>,
    pub trials_per_n: usize,
    /// Root of the per-trial sampling seeds.
    pub master_seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    pub lambda_rule: LambdaRule,
    pub gamma: GammaSetting,
    /// Relative to the output directory chosen at run time.
    #[serde(default)]
    pub outputs: OutputPaths,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n_grid.is_empty() {
            return Err(Error::invalid("n_grid is empty"));
        }
        if self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("n_grid must be positive and strictly ascending"));
        }
        if self.trials_per_n == 0 {
            return Err(Error::invalid("trials_per_n must be at least 1"));
        }
        if !(self.lambda_rule.scale > 0.0 && self.lambda_rule.scale.is_finite()) {
            return Err(Error::invalid("lambda_rule.scale must be positive"));
        }
        match &self.gamma {
            GammaSetting::Fixed(g) if !(*g > 0.0 && g.is_finite()) => {
                return Err(Error::invalid(format!("gamma must be positive, got {g}")))
            }
            GammaSetting::Sweep(grid) if grid.is_empty() || grid.iter().any(|g| !(*g > 0.0)) => {
                return Err(Error::invalid("gamma grid must be nonempty and positive"))
            }
            _ => {}
        }
        // Per-fit values are filled in later; check everything else now.
        SolverConfig {
            lambda: 1.0,
            gamma: 1.0,
            ..self.solver.clone()
        }
        .validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub gamma: f64,
    pub converged: bool,
    /// Solver error message, if the fit did not return an estimate.
    pub error: Option<String>,
    pub verdict: Option<ConsistencyVerdict>,
}

impl TrialOutcome {
    /// Non-converged fits count as failures regardless of their verdict.
    pub fn success(&self) -> bool {
        self.converged && self.verdict.as_ref().is_some_and(|v| v.algebraically_consistent)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveRow {
    pub n: usize,
    pub lambda: f64,
    pub trials: usize,
    pub successes: usize,
    pub p_success: f64,
    /// Normal-approximation 95% half-width.
    pub ci_halfwidth: f64,
    pub mean_gerr: f64,
    pub mean_coverr: f64,
    pub rank_matches: usize,
    pub sign_matches: usize,
    pub non_converged: usize,
    pub solver_errors: usize,
    #[serde(skip)]
    pub outcomes: Vec<TrialOutcome>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyCurve {
    pub rows: Vec<CurveRow>,
}

impl ConsistencyCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,p_success,ci_halfwidth,mean_gerr,mean_coverr\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.n, r.p_success, r.ci_halfwidth, r.mean_gerr, r.mean_coverr
            );
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub complexity: ModelComplexity,
    pub true_rank: usize,
    pub curve: ConsistencyCurve,
    /// Seconds since the Unix epoch; the only nondeterministic field.
    pub generated_at: u64,
}

/// Sampling seed of trial `trial` at grid index `n_index`: word zero of the
/// ChaCha stream selected by the counter.
pub fn trial_seed(master_seed: u64, n_index: usize, trial: usize, trials_per_n: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((n_index * trials_per_n + trial) as u64);
    rng.next_u64()
}

/// Worker count from `LVGGM_THREADS`, or `None` for the pool default.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&t| t > 0)
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = thread_cap() {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn run_trial(
    truth: &MarginalDecomposition,
    n: usize,
    lambda: f64,
    config: &ExperimentConfig,
    trial: usize,
    seed: u64,
) -> TrialOutcome {
    let fitted = truth.sample_covariance(n, seed).and_then(|sc| match &config.gamma {
        GammaSetting::Fixed(g) => fit(
            &sc,
            &SolverConfig {
                lambda,
                gamma: *g,
                ..config.solver.clone()
            },
        ),
        GammaSetting::Sweep(grid) => {
            gamma_sweep(&sc, lambda, grid, &config.solver).map(|r| r.recommended().clone())
        }
    });
    match fitted {
        Ok(est) => TrialOutcome {
            trial,
            seed,
            gamma: est.gamma,
            converged: est.converged,
            error: None,
            verdict: verdict(&est, truth).ok(),
        },
        Err(e) => TrialOutcome {
            trial,
            seed,
            gamma: f64::NAN,
            converged: false,
            error: Some(e.to_string()),
            verdict: None,
        },
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

fn aggregate(n: usize, lambda: f64, outcomes: Vec<TrialOutcome>) -> CurveRow {
    let trials = outcomes.len();
    let successes = outcomes.iter().filter(|o| o.success()).count();
    let p = successes as f64 / trials as f64;
    let verdicts = || outcomes.iter().filter_map(|o| o.verdict.as_ref());
    CurveRow {
        n,
        lambda,
        trials,
        successes,
        p_success: p,
        ci_halfwidth: 1.96 * (p * (1.0 - p) / trials as f64).sqrt(),
        mean_gerr: mean(verdicts().map(|v| v.g_gamma_error)),
        mean_coverr: mean(verdicts().map(|v| v.covariance_error_spectral)),
        rank_matches: verdicts().filter(|v| v.rank_match).count(),
        sign_matches: verdicts().filter(|v| v.sign_pattern_match).count(),
        non_converged: outcomes.iter().filter(|o| o.error.is_none() && !o.converged).count(),
        solver_errors: outcomes.iter().filter(|o| o.error.is_some()).count(),
        outcomes,
    }
}

/// One model for the whole curve, fresh samples for every trial. Trials run
/// on a worker pool; rows are assembled by trial index.
pub fn run_consistency_experiment(config: &ExperimentConfig) -> Result<ConsistencyCurve> {
    config.validate()?;
    let model = config.model.generator.build(config.model.seed)?;
    let truth = marginalize(&model)?;
    run_on_truth(config, &truth)
}

fn run_on_truth(config: &ExperimentConfig, truth: &MarginalDecomposition) -> Result<ConsistencyCurve> {
    let p = truth.p();
    let mut rows = Vec::with_capacity(config.n_grid.len());
    for (k, &n) in config.n_grid.iter().enumerate() {
        let lambda = lambda_schedule(p, n, config.lambda_rule.xi_hint, config.lambda_rule.scale)?;
        let outcomes: Vec<TrialOutcome> = with_pool(|| {
            (0..config.trials_per_n)
                .into_par_iter()
                .map(|t| {
                    let seed = trial_seed(config.master_seed, k, t, config.trials_per_n);
                    run_trial(truth, n, lambda, config, t, seed)
                })
                .collect()
        })?;
        let row = aggregate(n, lambda, outcomes);
        log::info!(
            "n={} lambda={:.4} success={}/{} non_converged={}",
            n,
            lambda,
            row.successes,
            row.trials,
            row.non_converged
        );
        rows.push(row);
    }
    Ok(ConsistencyCurve { rows })
}

// ---------------------------------------------------------------------------
// CSV ingestion

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestMode {
    /// Rows are observations, columns are variables.
    Samples,
    /// A square symmetric covariance matrix; `n` must be supplied.
    Covariance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ingested {
    pub covariance: SampleCovariance,
    pub columns: Vec<String>,
    pub warnings: Vec<String>,
}

/// Header row plus a dense numeric body. Rows and columns in errors are
/// 1-based positions in the file (the header is row 1).
fn read_numeric_csv<R: std::io::Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Ingest {
            row: 1,
            column: 1,
            message: "missing header row".into(),
        });
    }
    let width = header.len();
    let mut rows = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(k + 2);
        if record.len() != width {
            return Err(Error::Ingest {
                row,
                column: record.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let mut values = Vec::with_capacity(width);
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                row,
                column: j + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    row,
                    column: j + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        rows.push(values);
    }
    Ok((header, rows))
}

/// Reads a square symmetric matrix written with a header row.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, SymMatrix)> {
    read_matrix_from(fs::File::open(path)?)
}

fn read_matrix_from<R: std::io::Read>(reader: R) -> Result<(Vec<String>, SymMatrix)> {
    let (header, rows) = read_numeric_csv(reader)?;
    let p = header.len();
    if rows.len() != p {
        return Err(Error::Ingest {
            row: rows.len() + 1,
            column: 1,
            message: format!("matrix must be square: {p} columns but {} rows", rows.len()),
        });
    }
    for i in 0..p {
        for j in (i + 1)..p {
            let (a, b) = (rows[i][j], rows[j][i]);
            if (a - b).abs() > ASYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::Ingest {
                    row: i + 2,
                    column: j + 1,
                    message: format!("asymmetric entry: {a} vs {b} at the mirrored position"),
                });
            }
        }
    }
    let m = SymMatrix::from_fn(p, |i, j| 0.5 * (rows[i][j] + rows[j][i]));
    Ok((header, m))
}

/// Writes `m` with a header row; values use the shortest exact decimal form.
pub fn write_matrix_csv(path: &Path, m: &SymMatrix, names: Option<&[String]>) -> Result<()> {
    fs::write(path, matrix_csv(m, names))?;
    Ok(())
}

pub fn matrix_csv(m: &SymMatrix, names: Option<&[String]>) -> String {
    let p = m.dim();
    let header: Vec<String> = match names {
        Some(n) if n.len() == p => n.to_vec(),
        _ => (0..p).map(|j| format!("x{j}")).collect(),
    };
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..p {
        let row: Vec<String> = (0..p).map(|j| m.get(i, j).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes an `n x p` sample matrix with a header row.
pub fn write_samples_csv(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    let mut out = (0..x.ncols()).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..x.nrows() {
        let row: Vec<String> = (0..x.ncols()).map(|j| x[(i, j)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn ingest_csv(path: &Path, mode: IngestMode, n: Option<usize>) -> Result<Ingested> {
    ingest_reader(fs::File::open(path)?, mode, n)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, mode: IngestMode, n: Option<usize>) -> Result<Ingested> {
    match mode {
        IngestMode::Covariance => {
            let n = n.ok_or_else(|| Error::invalid("covariance input needs the sample count n"))?;
            let (columns, sigma) = read_matrix_from(reader)?;
            Ok(Ingested {
                covariance: SampleCovariance::new(sigma, n)?,
                columns,
                warnings: Vec::new(),
            })
        }
        IngestMode::Samples => {
            let (columns, rows) = read_numeric_csv(reader)?;
            let count = rows.len();
            if count == 0 {
                return Err(Error::Ingest {
                    row: 2,
                    column: 1,
                    message: "no observations".into(),
                });
            }
            if let Some(given) = n.filter(|&g| g != count) {
                warn!("ignoring n = {given}: the file holds {count} observations");
            }
            let p = columns.len();
            let mut x = DMatrix::from_fn(count, p, |i, j| rows[i][j]);
            let mut warnings = Vec::new();
            for j in 0..p {
                let mut col = x.column_mut(j);
                let m = col.mean();
                col.add_scalar_mut(-m);
                if col.iter().all(|v| v.abs() <= 1e-12 * m.abs().max(1.0)) {
                    col.fill(0.0);
                    let msg = format!("column {} ({}) has zero variance", j + 1, columns[j]);
                    warn!("{msg}");
                    warnings.push(msg);
                }
            }
            let sigma = matrix::second_moment(&x)?;
            Ok(Ingested {
                covariance: SampleCovariance::new(sigma, count)?,
                columns,
                warnings,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Clone, Debug)]
pub struct InputArgs {
    pub input: PathBuf,
    pub mode: IngestMode,
    pub n: Option<usize>,
}

/// Either an explicit `lambda` or the schedule.
#[derive(Clone, Debug)]
pub struct LambdaArgs {
    pub lambda: Option<f64>,
    pub scale: f64,
    pub xi_hint: Option<f64>,
}

impl LambdaArgs {
    fn resolve(&self, p: usize, n: usize) -> Result<f64> {
        match self.lambda {
            Some(l) if l > 0.0 && l.is_finite() => Ok(l),
            Some(l) => Err(Error::invalid(format!("lambda must be positive, got {l}"))),
            None => lambda_schedule(p, n, self.xi_hint, self.scale),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitArgs {
    pub input: InputArgs,
    pub lambda: LambdaArgs,
    pub gamma: f64,
    pub solver: SolverConfig,
    /// Model JSON of the generating model, for a verdict.
    pub truth: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub estimate: DecompositionEstimate,
    pub verdict: Option<ConsistencyVerdict>,
    pub warnings: Vec<String>,
    pub written: Vec<PathBuf>,
}

fn write_file(dir: &Path, name: impl AsRef<Path>, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    written.push(path);
    Ok(())
}

fn load_truth(path: &Path) -> Result<MarginalDecomposition> {
    let model = LatentVariableModel::from_json(&fs::read_to_string(path)?)?;
    marginalize(&model)
}

/// Writes `estimate.json`, `edges.csv` and, with a truth file, `verdict.json`.
pub fn fit_command(args: &FitArgs) -> Result<FitOutcome> {
    let ing = ingest_csv(&args.input.input, args.input.mode, args.input.n)?;
    let sc = &ing.covariance;
    let lambda = args.lambda.resolve(sc.p, sc.n)?;
    let cfg = SolverConfig {
        lambda,
        gamma: args.gamma,
        ..args.solver.clone()
    };
    let estimate = fit(sc, &cfg)?;
    let mut written = Vec::new();
    write_file(&args.out_dir, "estimate.json", &estimate.to_json()?, &mut written)?;
    write_file(&args.out_dir, "edges.csv", &estimate.edges_csv(), &mut written)?;
    let verdict = match &args.truth {
        Some(path) => {
            let truth = load_truth(path)?;
            let v = verdict(&estimate, &truth)?;
            write_file(&args.out_dir, "verdict.json", &serde_json::to_string_pretty(&v)?, &mut written)?;
            Some(v)
        }
        None => None,
    };
    Ok(FitOutcome {
        estimate,
        verdict,
        warnings: ing.warnings,
        written,
    })
}

#[derive(Clone, Debug)]
pub struct SweepArgs {
    pub input: InputArgs,
    pub lambda: LambdaArgs,
    pub gamma_grid: Vec<f64>,
    pub solver: SolverConfig,
    pub out_dir: PathBuf,
}

/// Writes `stability.json` and `sweep.csv`.
pub fn sweep_command(args: &SweepArgs) -> Result<(StabilityReport, Vec<PathBuf>)> {
    let ing = ingest_csv(&args.input.input, args.input.mode, args.input.n)?;
    let sc = &ing.covariance;
    let lambda = args.lambda.resolve(sc.p, sc.n)?;
    let report = gamma_sweep(sc, lambda, &args.gamma_grid, &args.solver)?;
    let mut written = Vec::new();
    write_file(&args.out_dir, "stability.json", &serde_json::to_string_pretty(&report)?, &mut written)?;
    write_file(&args.out_dir, "sweep.csv", &report.to_csv(), &mut written)?;
    Ok((report, written))
}

#[derive(Clone, Debug)]
pub enum DiagnoseSource {
    Model(PathBuf),
    /// `S` and `L` as square CSV matrices.
    Pair { s: PathBuf, l: PathBuf },
}

#[derive(Clone, Debug)]
pub struct DiagnoseArgs {
    pub source: DiagnoseSource,
    /// `None` picks the `gamma` minimising `chi`.
    pub gamma: Option<f64>,
    pub nearby_samples: usize,
    pub seed: u64,
}

impl Default for DiagnoseArgs {
    fn default() -> Self {
        Self {
            source: DiagnoseSource::Model(PathBuf::new()),
            gamma: None,
            nearby_samples: DEFAULT_NEARBY_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub complexity: Option<ModelComplexity>,
    pub geometry: GeometryReport,
    pub fisher: FisherDiagnostics,
    pub gamma_range: Option<(f64, f64)>,
}

/// Geometry and Fisher diagnostics at `(support(S), T(L))` with the
/// Fisher operator of `Sigma = (S - L)^{-1}`.
pub fn diagnose_pair(
    s: &SymMatrix,
    l: &SymMatrix,
    gamma: Option<f64>,
    nearby_samples: usize,
    seed: u64,
) -> Result<DiagnosisReport> {
    s.check_dim(l)?;
    let sigma = matrix::inverse(&s.sub(l))?;
    let omega = SupportSpace::from_matrix(s, MATRIX_SUPPORT_TOL * s.max_abs().max(1.0));
    let t = RankTangentSpace::from_matrix(l, 1e-9 * l.spectral_norm().max(1.0));
    let mu = mu_value(&omega, MU_EXACT_LIMIT);
    let xi = xi_bracket(&t, 8);
    let fisher = diagnostics(&FisherOperator::new(sigma)?, &omega, &t, &mu, &xi, nearby_samples, seed)?;
    let gamma = match gamma {
        Some(g) => g,
        None if mu.upper > 0.0 && xi.upper > 0.0 => (xi.upper / (2.0 * mu.upper)).sqrt(),
        None => 1.0,
    };
    let geometry = geometry_report(&omega, &t, gamma, None)?;
    Ok(DiagnosisReport {
        complexity: None,
        gamma_range: fisher.gamma_range,
        geometry,
        fisher,
    })
}

pub fn diagnose_command(args: &DiagnoseArgs) -> Result<DiagnosisReport> {
    match &args.source {
        DiagnoseSource::Model(path) => {
            let truth = load_truth(path)?;
            let mut report = diagnose_pair(&truth.s_true, &truth.l_true, args.gamma, args.nearby_samples, args.seed)?;
            report.complexity = Some(model_complexity(&truth, MATRIX_SUPPORT_TOL));
            Ok(report)
        }
        DiagnoseSource::Pair { s, l } => {
            let (_, s) = read_matrix_csv(s)?;
            let (_, l) = read_matrix_csv(l)?;
            diagnose_pair(&s, &l, args.gamma, args.nearby_samples, args.seed)
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Runs the experiment described by `config` and writes its curve CSV and
/// JSON summary under `out_dir`.
pub fn experiment_command(config: &ExperimentConfig, out_dir: &Path) -> Result<(ExperimentSummary, Vec<PathBuf>)> {
    config.validate()?;
    let model = config.model.generator.build(config.model.seed)?;
    let truth = marginalize(&model)?;
    let curve = run_on_truth(config, &truth)?;
    let summary = ExperimentSummary {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        complexity: model_complexity(&truth, MATRIX_SUPPORT_TOL),
        true_rank: truth.latent_rank(),
        curve,
        generated_at: unix_now(),
    };
    let mut written = Vec::new();
    write_file(out_dir, &config.outputs.curve_csv, &summary.curve.to_csv(), &mut written)?;
    write_file(
        out_dir,
        &config.outputs.summary_json,
        &serde_json::to_string_pretty(&summary)?,
        &mut written,
    )?;
    Ok((summary, written))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lvmodel::build_cycle_model;

    fn tiny_config(n_grid: Vec<usize>, trials: usize) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            label: "tiny".into(),
            model: ModelSpec {
                generator: GeneratorSpec::Cycle {
                    p: 8,
                    h: 1,
                    edge_pc: 0.25,
                    latent_frac: 0.8,
                    latent_scale: None,
                },
                seed: 3,
            },
            n_grid,
            trials_per_n: trials,
            master_seed: 11,
            solver: SolverConfig::default(),
            lambda_rule: LambdaRule {
                scale: 4.0,
                xi_hint: None,
            },
            gamma: GammaSetting::Fixed(0.35),
            outputs: OutputPaths::default(),
        }
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = tiny_config(vec![100, 200], 2);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = cfg.clone();
        bad.n_grid = vec![200, 100];
        assert!(bad.validate().is_err());
        bad = cfg.clone();
        bad.trials_per_n = 0;
        assert!(bad.validate().is_err());
        bad = cfg.clone();
        bad.schema_version = 99;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gamma_setting_accepts_number_or_list() {
        let f: GammaSetting = serde_json::from_str("0.3").unwrap();
        assert_eq!(f, GammaSetting::Fixed(0.3));
        let s: GammaSetting = serde_json::from_str("[0.2, 0.3]").unwrap();
        assert_eq!(s, GammaSetting::Sweep(vec![0.2, 0.3]));
    }

    #[test]
    fn trial_seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = (0..3).flat_map(|k| (0..10).map(move |t| trial_seed(5, k, t, 10))).collect();
        let mut uniq = seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), seeds.len());
        assert_eq!(trial_seed(5, 1, 2, 10), seeds[12]);
    }

    #[test]
    fn single_trial_gives_bernoulli_probability() {
        let curve = run_consistency_experiment(&tiny_config(vec![200_000], 1)).unwrap();
        let row = &curve.rows[0];
        assert!(row.p_success == 0.0 || row.p_success == 1.0);
        assert_eq!(row.trials, 1);
        assert_eq!(row.ci_halfwidth, 0.0);
    }

    #[test]
    fn sparse_only_model_requires_rank_zero() {
        let mut cfg = tiny_config(vec![50_000], 2);
        cfg.model.generator = GeneratorSpec::Cycle {
            p: 8,
            h: 0,
            edge_pc: 0.25,
            latent_frac: 0.8,
            latent_scale: None,
        };
        let curve = run_consistency_experiment(&cfg).unwrap();
        for o in &curve.rows[0].outcomes {
            let v = o.verdict.as_ref().unwrap();
            assert_eq!(v.true_rank, 0);
            assert_eq!(v.rank_match, v.estimated_rank == 0);
        }
    }

    #[test]
    fn experiment_is_deterministic() {
        let cfg = tiny_config(vec![500, 5000], 3);
        let a = run_consistency_experiment(&cfg).unwrap();
        let b = run_consistency_experiment(&cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_csv().lines().count(), 3);
    }

    #[test]
    fn ingest_identity_covariance() {
        let ing = ingest_reader("a,b\n1,0\n0,1\n".as_bytes(), IngestMode::Covariance, Some(10)).unwrap();
        assert_eq!(ing.covariance.sigma_n, SymMatrix::identity(2));
        assert_eq!(ing.covariance.n, 10);
        assert_eq!(ing.columns, vec!["a", "b"]);
    }

    #[test]
    fn ingest_covariance_requires_n() {
        let err = ingest_reader("a,b\n1,0\n0,1\n".as_bytes(), IngestMode::Covariance, None).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn ingest_reports_locations() {
        let ragged = ingest_reader("a,b\n1,2\n3\n".as_bytes(), IngestMode::Samples, None).unwrap_err();
        assert!(matches!(ragged, Error::Ingest { row: 3, .. }), "{ragged:?}");
        let text = ingest_reader("a,b\n1,2\n3,x\n".as_bytes(), IngestMode::Samples, None).unwrap_err();
        assert!(matches!(text, Error::Ingest { row: 3, column: 2, .. }), "{text:?}");
        let asym = ingest_reader("a,b,c\n1,0,0.5\n0,1,0\n0.4,0,1\n".as_bytes(), IngestMode::Covariance, Some(5))
            .unwrap_err();
        assert!(matches!(asym, Error::Ingest { row: 2, column: 3, .. }), "{asym:?}");
        let beyond = ingest_reader("a,b\n1,1e-7\n0,1\n".as_bytes(), IngestMode::Covariance, Some(5));
        assert!(matches!(beyond, Err(Error::Ingest { row: 2, column: 2, .. })));
        let within = ingest_reader("a,b\n1,1e-9\n0,1\n".as_bytes(), IngestMode::Covariance, Some(5)).unwrap();
        assert_eq!(within.covariance.sigma_n.get(0, 1), 5e-10);
    }

    #[test]
    fn ingest_samples_centers_and_flags_constant_column() {
        let ing = ingest_reader("a,b,c\n1,5,2\n3,5,4\n5,5,9\n".as_bytes(), IngestMode::Samples, None).unwrap();
        let s = &ing.covariance.sigma_n;
        assert_eq!(ing.covariance.n, 3);
        assert!((s.get(0, 0) - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.get(1, 1), 0.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(ing.warnings.len(), 1);
        assert!(ing.warnings[0].contains("column 2"));
    }

    #[test]
    fn matrix_csv_roundtrip_is_exact() {
        let d = marginalize(&build_cycle_model(6, 1, 0.25, 0.8, None, 2).unwrap()).unwrap();
        let text = matrix_csv(&d.sigma_marg, None);
        let ing = ingest_reader(text.as_bytes(), IngestMode::Covariance, Some(7)).unwrap();
        assert_eq!(ing.covariance.sigma_n, d.sigma_marg);
    }

    #[test]
    fn diagnose_pair_reports_range_fields() {
        let d = marginalize(&build_cycle_model(8, 1, 0.25, 0.8, None, 3).unwrap()).unwrap();
        let r = diagnose_pair(&d.s_true, &d.l_true, None, 4, 1).unwrap();
        assert_eq!(r.gamma_range, r.fisher.gamma_range);
        assert!(r.geometry.gamma > 0.0);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("gamma_range"));
    }
}
