use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shelab::experiments::{
    self, ChungParams, Convention, DBoundParams, DecompositionParams, EntropyParams,
    ExperimentParams, HzGapParams, LambdaFitParams, LocalizationParams, MinGridParams,
    RecursionParams,
};
use shelab::kernels::kappa_consistent;
use shelab::samplers::{sample_brownian, sample_fbm14, sample_gaussian_path, ZTorusSampler};
use shelab::smallball::{estimate_plain, estimate_splitting};
use shelab::spde::{linearization_error, solve_u, solve_z_coupled, NoiseArray};
use shelab::{
    CovKernel, ExperimentSpec, InitialCondition, Kernel, ProcessSpec, RngStream, Scheme, Sigma,
    SmallBallQuery, SpdeConfig, SplittingConfig, TimeGrid,
};

#[derive(Parser)]
#[command(
    name = "shelab",
    version,
    about = "Small-ball experiments for the stochastic heat equation"
)]
struct Cli {
    /// Master seed; every random draw descends from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (all cores when omitted).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root directory for experiment results.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw sample paths on a uniform grid.
    Sample(SampleArgs),
    /// Estimate a single small-ball probability.
    Estimate(EstimateArgs),
    /// Fit the small-ball constant from several radii.
    Lambda(LambdaArgs),
    /// Solve the nonlinear equation or measure its linearization error.
    Spde {
        #[command(subcommand)]
        command: SpdeCommand,
    },
    /// Running infimum of the normalized supremum along sampled paths.
    Chung(ChungArgs),
    /// Minimum of the field over a dyadic grid of sites.
    MinGrid(MinGridArgs),
    /// Deterministic and Monte Carlo consistency checks.
    Verify {
        #[command(subcommand)]
        check: VerifyCommand,
    },
    /// Run an experiment described by a TOML file.
    Run { config: PathBuf },
    /// Replay a run from its manifest and compare output digests.
    Rerun { manifest: PathBuf },
    /// Covariance kernels.
    Kernel {
        #[command(subcommand)]
        command: KernelCommand,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Process {
    Bm,
    Fbm14,
    T,
    H,
    HDense,
    Z,
}

#[derive(Args)]
struct ProcessArgs {
    #[arg(long, value_enum, default_value = "bm")]
    process: Process,
    /// Kappa of the auxiliary process (defaults to the consistent value).
    #[arg(long)]
    kappa: Option<f64>,
    /// Fourier modes of the torus field.
    #[arg(long, default_value_t = 1024)]
    modes: usize,
}

impl ProcessArgs {
    fn spec(&self) -> ProcessSpec {
        match self.process {
            Process::Bm => ProcessSpec::Bm,
            Process::Fbm14 => ProcessSpec::Fbm14,
            Process::T => ProcessSpec::TAux {
                kappa: self.kappa.unwrap_or_else(kappa_consistent),
            },
            Process::H => ProcessSpec::HFree,
            Process::HDense => ProcessSpec::HDense,
            Process::Z => ProcessSpec::ZTorus { modes: self.modes },
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    process: ProcessArgs,
    #[arg(long, default_value_t = 129)]
    points: usize,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output file (standard output when omitted).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Plain,
    Splitting,
}

#[derive(Args)]
struct SplittingArgs {
    #[arg(long, default_value_t = 200)]
    particles: usize,
    #[arg(long, default_value_t = 10)]
    sweeps: usize,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, value_enum, default_value = "pcn")]
    kernel: KernelChoice,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelChoice {
    Pcn,
    Gibbs,
}

impl SplittingArgs {
    fn config(&self) -> SplittingConfig {
        SplittingConfig {
            particles: self.particles,
            rejuvenation_sweeps: self.sweeps,
            repetitions: self.repetitions,
            kernel: match self.kernel {
                KernelChoice::Pcn => Kernel::Pcn,
                KernelChoice::Gibbs => Kernel::Gibbs,
            },
            ..SplittingConfig::default()
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    process: ProcessArgs,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    window_start: f64,
    #[arg(long, default_value_t = 1.0)]
    window_end: f64,
    #[arg(long, default_value_t = 257)]
    points: usize,
    #[arg(long, value_enum, default_value = "splitting")]
    method: Method,
    /// Sample size for the plain estimator.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[command(flatten)]
    splitting: SplittingArgs,
}

#[derive(Args)]
struct LambdaArgs {
    #[command(flatten)]
    process: ProcessArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.25, 0.2, 0.15])]
    epsilons: Vec<f64>,
    /// One grid size, or two to extrapolate in the grid spacing.
    #[arg(long, value_delimiter = ',', default_values_t = [1025, 4097])]
    points: Vec<usize>,
    #[arg(long)]
    exponent: Option<f64>,
    #[command(flatten)]
    splitting: SplittingArgs,
}

#[derive(Subcommand)]
enum SpdeCommand {
    /// Solve once and write the field as CSV.
    Solve {
        #[command(flatten)]
        config: SpdeArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Linearization error against the rate `sqrt(t) log(1/t)`.
    Rate {
        #[command(flatten)]
        config: SpdeArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-2, 1e-3])]
        t_list: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        replicas: usize,
    },
}

#[derive(Args)]
struct SpdeArgs {
    #[arg(long, default_value_t = 128)]
    m: usize,
    #[arg(long, default_value_t = 1e-4)]
    dt: f64,
    #[arg(long, default_value_t = 1e-2)]
    horizon: f64,
    /// `cos`, `sin`, `const:V` or `affine:SLOPE,INTERCEPT`.
    #[arg(long, default_value = "cos", value_parser = parse_sigma)]
    sigma: Sigma,
    /// `const:V`, `sin:AMPLITUDE,K` or `cos:AMPLITUDE,K`.
    #[arg(long, default_value = "sin:1,1", value_parser = parse_u0)]
    u0: InitialCondition,
    #[arg(long)]
    explicit: bool,
}

impl SpdeArgs {
    fn config(&self) -> SpdeConfig {
        SpdeConfig {
            m: self.m,
            dt: self.dt,
            horizon: self.horizon,
            sigma: self.sigma.clone(),
            u0: self.u0.clone(),
            scheme: if self.explicit {
                Scheme::Explicit
            } else {
                Scheme::SemiImplicit
            },
        }
    }
}

fn numbers(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect()
}

fn parse_sigma(s: &str) -> Result<Sigma, String> {
    let (name, rest) = s.split_once(':').unwrap_or((s, ""));
    match (name, numbers(rest).unwrap_or_default().as_slice()) {
        ("cos", []) => Ok(Sigma::Cos),
        ("sin", []) => Ok(Sigma::Sin),
        ("const", [v]) => Ok(Sigma::Constant { value: *v }),
        ("affine", [a, b]) => Ok(Sigma::Affine {
            slope: *a,
            intercept: *b,
        }),
        _ => Err(format!("unrecognized sigma `{s}`")),
    }
}

fn parse_u0(s: &str) -> Result<InitialCondition, String> {
    let (name, rest) = s.split_once(':').unwrap_or((s, ""));
    let values = numbers(rest)?;
    let mode = |k: f64| {
        if k >= 0.0 && k.fract() == 0.0 {
            Ok(k as u32)
        } else {
            Err(format!("bad mode {k}"))
        }
    };
    match (name, values.as_slice()) {
        ("const", [v]) => Ok(InitialCondition::Constant { value: *v }),
        ("sin", [a, k]) => Ok(InitialCondition::SinPi {
            amplitude: *a,
            k: mode(*k)?,
        }),
        ("cos", [a, k]) => Ok(InitialCondition::CosPi {
            amplitude: *a,
            k: mode(*k)?,
        }),
        _ => Err(format!("unrecognized initial condition `{s}`")),
    }
}

#[derive(Args)]
struct ChungArgs {
    #[arg(long, default_value_t = 200)]
    paths: usize,
    #[arg(long, default_value_t = 200)]
    points: usize,
    #[arg(long)]
    lambda_hat: Option<f64>,
}

#[derive(Args)]
struct MinGridArgs {
    #[arg(long)]
    lambda_hat: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 40])]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum, default_value = "corrected")]
    convention: ConventionChoice,
    #[arg(long, default_value_t = 65)]
    points: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConventionChoice {
    Corrected,
    AsWritten,
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Fitted decomposition of the free-space field and sampler covariances.
    Decomposition {
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        /// Skip the per-sampler covariance comparison.
        #[arg(long)]
        fit_only: bool,
    },
    /// Interpolation constant of the canonical distance.
    DBound,
    /// Ratio of the recursion to its fourth-power growth.
    Recursion,
    /// Covering numbers of the unit interval in the canonical distance.
    Entropy,
    /// Variance of the gap between the free-space and torus fields.
    HzGap,
}

#[derive(Subcommand)]
enum KernelCommand {
    /// Write `K(s, t)` on a uniform grid as CSV.
    Export {
        #[arg(long, value_enum, default_value = "h")]
        kernel: KernelName,
        #[arg(long, default_value_t = 65)]
        points: usize,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long, default_value_t = 1024)]
        modes: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelName {
    H,
    T,
    F,
    Bm,
    Z,
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn writer(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_experiment(cli: &Cli, id: &str, params: ExperimentParams) -> CliResult<ExitCode> {
    let spec = ExperimentSpec {
        id: id.to_string(),
        params,
    };
    spec.validate()?;
    let out =
        experiments::with_threads(cli.threads, || experiments::run(&spec, cli.seed, &cli.out))??;
    println!("{} ({})", spec.params.target(), spec.params.kind());
    for row in &out.summary {
        if row.reference.is_empty() {
            println!("  {}: {}", row.quantity, row.value);
        } else {
            println!(
                "  {}: {}  [reference {}]",
                row.quantity, row.value, row.reference
            );
        }
    }
    println!("results in {}", out.dir.display());
    Ok(ExitCode::SUCCESS)
}

fn sample(cli: &Cli, a: &SampleArgs) -> CliResult<ExitCode> {
    let grid = TimeGrid::uniform(a.horizon, a.points)?;
    let rng = RngStream::new(cli.seed, 0);
    let ens = experiments::with_threads(cli.threads, || match a.process.spec() {
        ProcessSpec::Bm => sample_brownian(&grid, a.count, rng),
        ProcessSpec::Fbm14 => sample_fbm14(&grid, a.count, rng),
        ProcessSpec::TAux { kappa } => {
            sample_gaussian_path(&CovKernel::TAux { kappa }, &grid, a.count, rng).map(|r| r.0)
        }
        ProcessSpec::ZTorus { modes } => {
            ZTorusSampler::new(&grid, 1, modes).map(|s| s.sample(a.count, rng).at_point(0))
        }
        _ => sample_gaussian_path(&CovKernel::HFree, &grid, a.count, rng).map(|r| r.0),
    })??;
    let mut w = writer(a.output.as_deref())?;
    match a.format {
        Format::Csv => ens.write_csv(&mut w)?,
        Format::Binary => ens.write_binary(&mut w)?,
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn estimate(cli: &Cli, a: &EstimateArgs) -> CliResult<ExitCode> {
    let query = SmallBallQuery::new(
        a.process.spec(),
        a.epsilon,
        [a.window_start, a.window_end],
        a.points,
    )?;
    let rng = RngStream::new(cli.seed, 0);
    let record = experiments::with_threads(cli.threads, || match a.method {
        Method::Plain => estimate_plain(&query, a.samples, rng),
        Method::Splitting => estimate_splitting(&query, &a.splitting.config(), rng),
    })??;
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(ExitCode::SUCCESS)
}

fn spde(cli: &Cli, command: &SpdeCommand) -> CliResult<ExitCode> {
    match command {
        SpdeCommand::Solve { config, output } => {
            let cfg = config.config();
            cfg.validate()?;
            let noise = NoiseArray::sample(&cfg, RngStream::new(cli.seed, 0));
            let u = solve_u(&cfg, &noise)?;
            let z = solve_z_coupled(&cfg, &noise)?;
            let err = linearization_error(&u, &z, &cfg)?;
            eprintln!(
                "sup |u| = {:.6e}, sup |linearization error| = {:.6e}",
                u.sup_abs(),
                err.sup_abs()
            );
            let mut w = writer(output.as_deref())?;
            u.write_csv(&mut w)?;
            w.flush()?;
            Ok(ExitCode::SUCCESS)
        }
        SpdeCommand::Rate {
            config,
            t_list,
            replicas,
        } => {
            let p = LocalizationParams {
                spde: config.config(),
                t_list: t_list.clone(),
                replicas: *replicas,
                ..LocalizationParams::default()
            };
            run_experiment(cli, "spde-rate", ExperimentParams::LocalizationRate(p))
        }
    }
}

fn export_kernel(command: &KernelCommand) -> CliResult<ExitCode> {
    let KernelCommand::Export {
        kernel,
        points,
        horizon,
        kappa,
        modes,
        output,
    } = command;
    let k = match kernel {
        KernelName::H => CovKernel::HFree,
        KernelName::T => CovKernel::TAux {
            kappa: kappa.unwrap_or_else(kappa_consistent),
        },
        KernelName::F => CovKernel::FFbm14,
        KernelName::Bm => CovKernel::Bm,
        KernelName::Z => CovKernel::ZTorus {
            x: 0.0,
            y: 0.0,
            modes: *modes,
        },
    };
    let grid = TimeGrid::uniform(*horizon, *points)?;
    let mut w = writer(output.as_deref())?;
    writeln!(w, "s,t,value")?;
    for &s in grid.points() {
        for &t in grid.points() {
            writeln!(w, "{s:e},{t:e},{:e}", k.eval(s, t)?)?;
        }
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: &Cli) -> CliResult<ExitCode> {
    match &cli.command {
        Command::Sample(a) => sample(cli, a),
        Command::Estimate(a) => estimate(cli, a),
        Command::Lambda(a) => {
            let p = LambdaFitParams {
                process: a.process.spec(),
                epsilons: a.epsilons.clone(),
                points: a.points.clone(),
                exponent: a.exponent,
                splitting: a.splitting.config(),
                ..LambdaFitParams::default()
            };
            run_experiment(cli, "lambda", ExperimentParams::LambdaFit(p))
        }
        Command::Spde { command } => spde(cli, command),
        Command::Chung(a) => {
            let p = ChungParams {
                paths: a.paths,
                points: a.points,
                lambda_hat: a.lambda_hat,
                ..ChungParams::default()
            };
            run_experiment(cli, "chung", ExperimentParams::ChungDiagnostic(p))
        }
        Command::MinGrid(a) => {
            let p = MinGridParams {
                lambda_hat: Some(a.lambda_hat),
                ns: a.ns.clone(),
                alpha: a.alpha,
                gamma: a.gamma,
                convention: match a.convention {
                    ConventionChoice::Corrected => Convention::Corrected,
                    ConventionChoice::AsWritten => Convention::AsWritten,
                },
                points: a.points,
                ..MinGridParams::default()
            };
            run_experiment(cli, "min-grid", ExperimentParams::MinGrid(p))
        }
        Command::Verify { check } => {
            let (id, params) = match check {
                VerifyCommand::Decomposition { paths, fit_only } => (
                    "verify-decomposition",
                    ExperimentParams::DecompositionCheck(DecompositionParams {
                        paths: *paths,
                        check_samplers: !fit_only,
                        ..DecompositionParams::default()
                    }),
                ),
                VerifyCommand::DBound => (
                    "verify-d-bound",
                    ExperimentParams::DBound(DBoundParams::default()),
                ),
                VerifyCommand::Recursion => (
                    "verify-recursion",
                    ExperimentParams::Recursion(RecursionParams::default()),
                ),
                VerifyCommand::Entropy => (
                    "verify-entropy",
                    ExperimentParams::Entropy(EntropyParams::default()),
                ),
                VerifyCommand::HzGap => (
                    "verify-hz-gap",
                    ExperimentParams::HzGap(HzGapParams::default()),
                ),
            };
            run_experiment(cli, id, params)
        }
        Command::Run { config } => {
            let spec = ExperimentSpec::from_file(config)?;
            run_experiment(cli, &spec.id.clone(), spec.params)
        }
        Command::Rerun { manifest } => {
            let report =
                experiments::with_threads(cli.threads, || experiments::rerun(manifest, None))??;
            println!("rerun written to {}", report.rerun.dir.display());
            if report.identical() {
                println!("all {} output digests match", report.original.files.len());
                Ok(ExitCode::SUCCESS)
            } else {
                for m in &report.mismatches {
                    println!("mismatch: {m}");
                }
                Ok(ExitCode::from(3))
            }
        }
        Command::Kernel { command } => export_kernel(command),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
