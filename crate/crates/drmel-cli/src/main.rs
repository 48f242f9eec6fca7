//! Command-line front end: fit, test, region, simulate, and qq subcommands
//! over the quantile-inference library, with reproducible seeding and file
//! outputs.
//!
//! Exit codes: 0 success, 2 input/validation error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drmel::el::{fit_unconstrained, fitted_cdf, mele_quantile};
use drmel::elrt::{elrt_region, elrt_region_in_box, elrt_statistic};
use drmel::method::{by_name, MethodContext, MethodOptions, Region};
use drmel::model::{load_samples, validate_quantile_values, BasisFunction, MultiSample, QuantileSpec};
use drmel::sim::{load_design, run_coverage, run_qq, Design, Family};
use drmel::solver::SolveOptions;
use drmel::wald_np::wald_estimate;
use drmel::{Error, Result};

#[derive(Parser)]
#[command(
    name = "drmel",
    about = "Empirical-likelihood quantile inference for multiple samples under a density ratio model",
    version
)]
struct Cli {
    /// Bound the worker-thread count for grids, bootstraps, and replicates.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model by maximum empirical likelihood and report θ̂, the
    /// log-EL, and conditioning diagnostics.
    Fit(FitArgs),
    /// Test H0: ξ = ξ* by the empirical-likelihood ratio with chi-square
    /// calibration.
    Test(TestArgs),
    /// Evaluate a two-quantile confidence region and write the grid (or
    /// ellipse) to a file.
    Region(RegionArgs),
    /// Run a Monte Carlo coverage study over the registered methods.
    Simulate(SimulateArgs),
    /// Simulate the null distribution of the test statistic and write Q-Q
    /// pairs against its chi-square reference.
    Qq(QqArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Two-column data file: <population index><delimiter><value>.
    #[arg(long)]
    data: PathBuf,
    /// Basis components, e.g. "1,x,x2" or "1,x,logx".
    #[arg(long)]
    basis: String,
    /// Field delimiter in data and output files.
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Optional quantile specs "r:tau" whose maximum-EL estimates are
    /// reported after the fit.
    #[arg(long = "spec")]
    specs: Vec<String>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Hypothesis specs "r:tau:xi_star" (repeatable); every spec must carry
    /// a hypothesized value.
    #[arg(long = "spec", required = true)]
    specs: Vec<String>,
}

#[derive(Args)]
struct RegionArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Exactly two quantile specs "r:tau".
    #[arg(long = "spec", required = true)]
    specs: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Region method: elrt, wald, or np.
    #[arg(long, default_value = "elrt")]
    method: String,
    /// Grid resolution "NX" or "NXxNY" for the elrt contour.
    #[arg(long, default_value = "101")]
    grid: String,
    /// Bootstrap replicates for the Wald covariance. For the elrt method
    /// this switches the evaluation box to the doubled Wald ellipse box.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file for the region export.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DesignArgs {
    /// Design file (key = value lines); flags below override nothing when
    /// this is given.
    #[arg(long)]
    design: Option<PathBuf>,
    /// Population family: normal, gamma, or resample.
    #[arg(long)]
    family: Option<String>,
    #[arg(long, value_delimiter = ',')]
    means: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    sds: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    shapes: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    scales: Vec<f64>,
    /// Source data file for the resample family.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long)]
    basis: Option<String>,
    /// Quantile specs "r:tau" (true values by default) or "r:tau:xi".
    #[arg(long = "spec")]
    specs: Vec<String>,
    /// Confidence levels as alphas, e.g. "0.10,0.05".
    #[arg(long, value_delimiter = ',', default_values_t = [0.05])]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Methods to include, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = ["elrt".to_string(), "wald".to_string(), "np".to_string()])]
    methods: Vec<String>,
    /// Grid resolution for elrt region areas.
    #[arg(long, default_value = "101")]
    grid: String,
    #[arg(long, default_value_t = 300)]
    bootstrap: usize,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QqArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(args) => cmd_fit(args),
        Command::Test(args) => cmd_test(args),
        Command::Region(args) => cmd_region(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Qq(args) => cmd_qq(args),
    }
}

fn load_inputs(data: &DataArgs) -> Result<(MultiSample, BasisFunction)> {
    let ms = load_samples(&data.data, data.delimiter)?;
    let basis = BasisFunction::parse(&data.basis)?;
    basis.check_domain(&ms)?;
    Ok((ms, basis))
}

fn parse_specs(raw: &[String]) -> Result<Vec<QuantileSpec>> {
    raw.iter().map(|s| QuantileSpec::parse(s)).collect()
}

/// Honor the output-directory override for relative paths.
fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os("DRMEL_OUT_DIR") {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    let path = resolve_out(path);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| Error::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }
    fs::write(&path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let (ms, basis) = load_inputs(&args.data)?;
    let specs = parse_specs(&args.specs)?;
    for spec in &specs {
        spec.check_population(&ms)?;
    }
    let fit = fit_unconstrained(&ms, &basis, &SolveOptions::default())?;
    println!("populations: {} (m = {}), n = {}", ms.n_populations(), ms.m(), ms.total());
    println!("basis: {basis}");
    for r in 1..=ms.m() {
        let row: Vec<String> = fit
            .theta_hat
            .row(r)
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect();
        println!("theta[{r}] = {}", row.join(" "));
    }
    println!("log_el = {:.6}", fit.log_el);
    println!("condition = {:.3e}", fit.condition);
    if fit.ill_conditioned() {
        println!("warning: information matrix condition exceeds 1e12; estimates may be fragile");
    }
    for spec in &specs {
        let fc = fitted_cdf(&fit, &ms, &basis, spec.population)?;
        let q = mele_quantile(&fc, spec.tau)?;
        println!("mele[{}:{}] = {:.6}", spec.population, spec.tau, q);
    }
    Ok(())
}

fn cmd_test(args: TestArgs) -> Result<()> {
    let (ms, basis) = load_inputs(&args.data)?;
    let specs = parse_specs(&args.specs)?;
    validate_quantile_values(&ms, &specs)?;
    let t = elrt_statistic(&ms, &basis, &specs, &SolveOptions::default())?;
    if !t.converged {
        return Err(Error::SolverFailure(
            "profile solve did not converge".to_string(),
        ));
    }
    for spec in &specs {
        println!(
            "H0: xi[{}] at level {} equals {}",
            spec.population,
            spec.tau,
            spec.value.unwrap()
        );
    }
    println!("Rn={:.6} df={} p={:.6}", t.r_n, t.df, t.p_value);
    Ok(())
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let parse_one = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("bad grid size {t:?}")))
    };
    let (nx, ny) = match s.split_once('x') {
        Some((a, b)) => (parse_one(a)?, parse_one(b)?),
        None => {
            let n = parse_one(s)?;
            (n, n)
        }
    };
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidArgument(
            "grid needs at least 2 points per axis".to_string(),
        ));
    }
    Ok((nx, ny))
}

fn cmd_region(args: RegionArgs) -> Result<()> {
    let (ms, basis) = load_inputs(&args.data)?;
    let specs = parse_specs(&args.specs)?;
    if specs.len() != 2 {
        return Err(Error::InvalidSpec(
            "region needs exactly two --spec arguments".to_string(),
        ));
    }
    let (nx, ny) = parse_grid(&args.grid)?;
    let solve = SolveOptions::default();
    let delim = args.data.delimiter;
    match args.method.as_str() {
        "elrt" => {
            let grid = match args.bootstrap {
                Some(b) => {
                    let est = wald_estimate(&ms, &basis, &specs, b, args.seed, &solve)?;
                    let wr = drmel::wald_np::wald_region(&est, ms.total(), args.alpha)?;
                    let bb = wr.bbox();
                    // Doubled Wald box around the center.
                    let grow = |(lo, hi): (f64, f64)| {
                        let c = 0.5 * (lo + hi);
                        let h = hi - c;
                        (c - 2.0 * h, c + 2.0 * h)
                    };
                    elrt_region_in_box(
                        &ms,
                        &basis,
                        &specs,
                        args.alpha,
                        nx,
                        ny,
                        &solve,
                        [grow(bb[0]), grow(bb[1])],
                    )?
                }
                None => elrt_region(&ms, &basis, &specs, args.alpha, nx, ny, &solve)?,
            };
            println!(
                "elrt region: threshold={:.6} alpha={} area={:.6} failures={}",
                grid.threshold, grid.alpha, grid.area, grid.failures
            );
            write_out(&args.out, &grid.export(delim))
        }
        name => {
            let method = by_name(name).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method {name:?}; registered: elrt, wald, np"
                ))
            })?;
            let mut opts = MethodOptions::default();
            opts.grid_nx = nx;
            opts.grid_ny = ny;
            if let Some(b) = args.bootstrap {
                opts.bootstrap_replicates = b;
            }
            opts.seed = args.seed;
            let ctx = MethodContext {
                ms: &ms,
                basis: &basis,
                specs: &specs,
                alphas: &[args.alpha],
                truth: None,
                opts: &opts,
            };
            let analysis = method.analyze(&ctx)?;
            let outcome = &analysis.outcomes[0];
            println!(
                "{} region: threshold={:.6} alpha={} area={:.6}",
                analysis.method,
                outcome.threshold,
                outcome.alpha,
                outcome.size.unwrap_or(f64::NAN)
            );
            let region: &Region = outcome.region.as_ref().unwrap();
            write_out(&args.out, &region.export(delim))
        }
    }
}

fn build_design(args: &DesignArgs) -> Result<Design> {
    if let Some(path) = &args.design {
        return load_design(path);
    }
    let family = match args.family.as_deref() {
        Some("normal") => Family::Normal {
            means: args.means.clone(),
            sds: args.sds.clone(),
        },
        Some("gamma") => Family::Gamma {
            shapes: args.shapes.clone(),
            scales: args.scales.clone(),
        },
        Some("resample") => {
            let path = args.source.as_ref().ok_or_else(|| {
                Error::InvalidArgument("resample family needs --source".to_string())
            })?;
            Family::Resample {
                source: load_samples(path, ',')?,
            }
        }
        Some(other) => {
            return Err(Error::InvalidArgument(format!(
                "unknown family {other:?}; expected normal, gamma, or resample"
            )))
        }
        None => {
            return Err(Error::InvalidArgument(
                "give either --design or --family with its parameters".to_string(),
            ))
        }
    };
    let basis = BasisFunction::parse(args.basis.as_deref().ok_or_else(|| {
        Error::InvalidArgument("--basis is required without a design file".to_string())
    })?)?;
    let design = Design {
        family,
        sizes: args.sizes.clone(),
        basis,
        specs: parse_specs(&args.specs)?,
        alphas: args.alpha.clone(),
        replicates: args.reps,
        seed: args.seed,
    };
    design.validate()?;
    Ok(design)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let design = build_design(&args.design)?;
    let (nx, ny) = parse_grid(&args.grid)?;
    let mut opts = MethodOptions::default();
    opts.grid_nx = nx;
    opts.grid_ny = ny;
    opts.bootstrap_replicates = args.bootstrap;
    let table = run_coverage(&design, &args.methods, &opts)?;
    let text = table.export(args.delimiter);
    print!("{text}");
    write_out(&args.out, &text)
}

fn cmd_qq(args: QqArgs) -> Result<()> {
    let design = build_design(&args.design)?;
    let opts = MethodOptions::default();
    let qq = run_qq(&design, design.replicates, &opts)?;
    println!(
        "qq: reps={} df={} ks={:.4} reject@0.05={:.4} failures={}",
        qq.rn.len(),
        qq.df,
        qq.ks_distance(),
        qq.rejection_rate(0.05),
        qq.failures
    );
    write_out(&args.out, &qq.export(args.delimiter))
}
