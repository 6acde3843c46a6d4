use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use lvggm::harness::{
    self, DiagnoseArgs, DiagnoseSource, ExperimentConfig, FitArgs, IngestMode, InputArgs, LambdaArgs, SweepArgs,
};
use lvggm::lvmodel::{marginalize, GeneratorSpec};
use lvggm::matrix;
use lvggm::solver::SolverConfig;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

/// Sparse plus low-rank estimation of latent-variable Gaussian graphical models.
#[derive(Parser)]
#[command(name = "lvggm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit (S, L) to one data set.
    Fit(FitCmd),
    /// Fit along a gamma grid and report where the structure is stable.
    Sweep(SweepCmd),
    /// Identifiability diagnostics of a model or an (S, L) pair.
    Diagnose(DiagnoseCmd),
    /// Run a consistency experiment from a JSON config.
    Experiment(ExperimentCmd),
    /// Write a synthetic model and, optionally, data drawn from it.
    Generate(GenerateCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Samples,
    Covariance,
}

impl From<Mode> for IngestMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Samples => IngestMode::Samples,
            Mode::Covariance => IngestMode::Covariance,
        }
    }
}

#[derive(Args)]
struct InputOpts {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "samples")]
    mode: Mode,
    /// Sample count behind a covariance input.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct LambdaOpts {
    /// Explicit lambda; overrides the schedule.
    #[arg(long)]
    lambda: Option<f64>,
    /// lambda = scale * sqrt(p / n) / xi_hint.
    #[arg(long, default_value_t = 1.0)]
    lambda_scale: f64,
    #[arg(long)]
    xi_hint: Option<f64>,
}

#[derive(Args)]
struct SolverOpts {
    #[arg(long, default_value_t = 20_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
}

impl SolverOpts {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            max_iters: self.max_iters,
            tol_primal: self.tol,
            tol_dual: self.tol,
            rho_admm: self.rho,
            ..SolverConfig::default()
        }
    }
}

#[derive(Args)]
struct FitCmd {
    #[command(flatten)]
    input: InputOpts,
    #[command(flatten)]
    lambda: LambdaOpts,
    #[arg(long)]
    gamma: f64,
    #[command(flatten)]
    solver: SolverOpts,
    /// Model JSON of the generating model; adds verdict.json.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    input: InputOpts,
    #[command(flatten)]
    lambda: LambdaOpts,
    /// Ascending gamma values, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    gammas: Vec<f64>,
    #[command(flatten)]
    solver: SolverOpts,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DiagnoseCmd {
    /// Model JSON.
    #[arg(long, conflicts_with_all = ["s", "l"], required_unless_present_all = ["s", "l"])]
    model: Option<PathBuf>,
    /// Sparse component as a square CSV.
    #[arg(long, requires = "l")]
    s: Option<PathBuf>,
    /// Low-rank component as a square CSV.
    #[arg(long, requires = "s")]
    l: Option<PathBuf>,
    /// Gamma for the geometry report; defaults to the one minimising chi.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = lvggm::fisher::DEFAULT_NEARBY_SAMPLES)]
    nearby_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentCmd {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Cycle,
    Grid,
}

#[derive(Args)]
struct GenerateCmd {
    #[arg(long, value_enum, default_value = "cycle")]
    kind: Kind,
    /// Observed variables (cycle).
    #[arg(long, default_value_t = 36)]
    p: usize,
    /// Grid side lengths (grid).
    #[arg(long, default_value_t = 6)]
    rows: usize,
    #[arg(long, default_value_t = 6)]
    cols: usize,
    #[arg(long, default_value_t = 2)]
    h: usize,
    #[arg(long, default_value_t = 0.25)]
    edge_pc: f64,
    #[arg(long, default_value_t = 0.8)]
    latent_frac: f64,
    #[arg(long)]
    latent_scale: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also draw this many observations.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    /// Where to write the observations.
    #[arg(long, requires = "samples")]
    samples_out: Option<PathBuf>,
    /// Write the true marginal covariance here.
    #[arg(long)]
    covariance_out: Option<PathBuf>,
}

fn input_args(o: &InputOpts) -> InputArgs {
    InputArgs {
        input: o.input.clone(),
        mode: o.mode.into(),
        n: o.n,
    }
}

fn lambda_args(o: &LambdaOpts) -> LambdaArgs {
    LambdaArgs {
        lambda: o.lambda,
        scale: o.lambda_scale,
        xi_hint: o.xi_hint,
    }
}

fn run(command: Command) -> lvggm::Result<u8> {
    match command {
        Command::Fit(c) => {
            let out = harness::fit_command(&FitArgs {
                input: input_args(&c.input),
                lambda: lambda_args(&c.lambda),
                gamma: c.gamma,
                solver: c.solver.config(),
                truth: c.truth,
                out_dir: c.out_dir,
            })?;
            let est = &out.estimate;
            println!(
                "lambda={} gamma={} rank={} edges={} iters={} converged={}",
                est.lambda,
                est.gamma,
                est.rank(),
                est.edge_count(),
                est.iters,
                est.converged
            );
            if let Some(v) = &out.verdict {
                println!(
                    "consistent={} sign_match={} rank_match={}",
                    v.algebraically_consistent, v.sign_pattern_match, v.rank_match
                );
            }
            for p in &out.written {
                info!("wrote {}", p.display());
            }
            if !est.converged {
                warn!("solver stopped after {} iterations without converging", est.iters);
                return Ok(EXIT_NOT_CONVERGED);
            }
            Ok(0)
        }
        Command::Sweep(c) => {
            let (report, written) = harness::sweep_command(&SweepArgs {
                input: input_args(&c.input),
                lambda: lambda_args(&c.lambda),
                gamma_grid: c.gammas,
                solver: c.solver.config(),
                out_dir: c.out_dir,
            })?;
            println!(
                "lambda={} recommended_gamma={} runs={}",
                report.lambda,
                report.recommended_gamma,
                report.runs.len()
            );
            for p in &written {
                info!("wrote {}", p.display());
            }
            Ok(0)
        }
        Command::Diagnose(c) => {
            let source = match (c.model, c.s, c.l) {
                (Some(m), _, _) => DiagnoseSource::Model(m),
                (None, Some(s), Some(l)) => DiagnoseSource::Pair { s, l },
                _ => unreachable!("clap enforces the source flags"),
            };
            let report = harness::diagnose_command(&DiagnoseArgs {
                source,
                gamma: c.gamma,
                nearby_samples: c.nearby_samples,
                seed: c.seed,
            })?;
            let json = serde_json::to_string_pretty(&report)?;
            match c.out {
                Some(path) => std::fs::write(path, json)?,
                None => {
                    // A closed pipe (e.g. `| head`) is not an error.
                    let _ = writeln!(std::io::stdout(), "{json}");
                }
            }
            Ok(0)
        }
        Command::Experiment(c) => {
            let config = ExperimentConfig::load(&c.config)?;
            let (summary, written) = harness::experiment_command(&config, &c.out_dir)?;
            print!("{}", summary.curve.to_csv());
            for p in &written {
                info!("wrote {}", p.display());
            }
            Ok(0)
        }
        Command::Generate(c) => {
            let spec = match c.kind {
                Kind::Cycle => GeneratorSpec::Cycle {
                    p: c.p,
                    h: c.h,
                    edge_pc: c.edge_pc,
                    latent_frac: c.latent_frac,
                    latent_scale: c.latent_scale,
                },
                Kind::Grid => GeneratorSpec::Grid {
                    rows: c.rows,
                    cols: c.cols,
                    h: c.h,
                    edge_pc: c.edge_pc,
                    latent_frac: c.latent_frac,
                    latent_scale: c.latent_scale,
                },
            };
            let model = spec.build(c.seed)?;
            std::fs::write(&c.out, model.to_json()?)?;
            let truth = marginalize(&model)?;
            if let Some(path) = &c.covariance_out {
                harness::write_matrix_csv(path, &truth.sigma_marg, None)?;
            }
            if let (Some(n), Some(path)) = (c.samples, &c.samples_out) {
                let x = matrix::mvn_sample(&truth.sigma_marg, n, c.sample_seed)?;
                harness::write_samples_csv(path, &x)?;
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
