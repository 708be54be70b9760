use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tpf_core::distributions::InputDistribution;
use tpf_core::grid::{residual, GridSpec};
use tpf_core::instances::InstanceSpec;
use tpf_core::numerics::{norm_inf, RngStream};
use tpf_core::sampler::{
    benchmark, effective_sample_rate, generate_direct, generate_importance, golden_residuals,
    Dataset, GenerateOptions,
};
use tpf_core::solver::{Method, SolveError, Solver, SolverConfig};

mod table;

use table::{Format, Table};

/// Thermal power flow for district heating grids.
#[derive(Debug, Parser)]
#[command(name = "tpf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a grid file and its input distribution file.
    GenGrid {
        #[command(flatten)]
        grid: GridArgs,
        /// Path prefix; writes PREFIX.grid.json and PREFIX.dist.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one scenario and report convergence.
    Solve {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, value_enum, default_value = "combined")]
        method: MethodArg,
        /// Residual tolerance for both solver phases.
        #[arg(long)]
        tol: Option<f64>,
        /// Draw the scenario from the input distribution instead of using its mean.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the convergence trace here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Generate a training dataset.
    Sample {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tol: Option<f64>,
        /// Record the log Jacobian determinant and include it in the weights.
        #[arg(long)]
        jacobian: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Time both generators serially.
    Bench {
        #[command(flatten)]
        grid: GridArgs,
        /// Sample counts, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        #[arg(long)]
        seed: u64,
        /// Runs per sample count; run r uses seed + r.
        #[arg(long, default_value_t = 1)]
        repeats: u64,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Effective sample rate of importance-sampled datasets, or of a dataset file.
    Esr {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, conflicts_with_all = ["n", "seed", "repeats"])]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "data")]
        n: Option<usize>,
        #[arg(long, required_unless_present = "data")]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        repeats: u64,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Check a grid file, and optionally the residuals of a dataset on it.
    Validate {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Largest residual max-norm accepted for dataset samples.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Write reference residuals for stored and perturbed dataset states.
    Golden {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        seed: u64,
        /// Number of cases; half are perturbed.
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Grid file written by gen-grid. The distribution is read from the
    /// sibling .dist.json file unless --dist is given.
    #[arg(
        long,
        required_unless_present = "instance",
        conflicts_with = "instance"
    )]
    grid: Option<PathBuf>,
    /// Built-in instance name such as L16_1.6.11.16 or C12_1.7.
    #[arg(long)]
    instance: Option<String>,
    #[arg(long, requires = "grid")]
    dist: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Dc,
    Nr,
    Combined,
    Direct,
    Is,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl Failure {
    fn numerical(e: impl ToString) -> Self {
        Failure::Numerical(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("TPF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Usage(format!(
            "TPF_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenGrid { grid, out } => {
            let (spec, dist, _) = load(&grid)?;
            let grid_path = with_suffix(&out, ".grid.json");
            let dist_path = with_suffix(&out, ".dist.json");
            write(&grid_path, &spec.to_json())?;
            write(&dist_path, &dist.to_json())?;
            println!("{}\n{}", grid_path.display(), dist_path.display());
            Ok(())
        }
        Command::Solve {
            grid,
            method,
            tol,
            seed,
            out,
            format,
        } => {
            let (spec, dist, name) = load(&grid)?;
            let method = match method {
                MethodArg::Dc => Method::Dc,
                MethodArg::Nr => Method::Nr,
                MethodArg::Combined => Method::Combined,
                _ => {
                    return Err(Failure::Usage(
                        "solve takes --method dc, nr or combined".into(),
                    ))
                }
            };
            let solver = Solver::new(&spec, config(tol)?).map_err(Failure::numerical)?;
            let input = match seed {
                None => dist.mean_scenario(),
                Some(seed) => {
                    let mut draws = 0;
                    dist.draw(&mut RngStream::new(seed), &mut draws, u64::MAX)
                        .map_err(Failure::numerical)?
                }
            };
            let (report, failure) = match solver.solve(method, &input) {
                Ok((_, report)) => (report, None),
                Err(SolveError::NotConverged { report, .. }) => {
                    let msg = format!(
                        "{} did not converge (|F|inf = {:e})",
                        method.as_str(),
                        report.final_residual_inf
                    );
                    (*report, Some(msg))
                }
                Err(e) => return Err(Failure::numerical(e)),
            };
            let mut t = Table::new(&[
                "grid",
                "method",
                "converged",
                "dc_iterations",
                "nr_iterations",
                "restarts",
                "residual_inf",
                "clamp_activations",
                "wall_time_s",
            ]);
            t.row(vec![
                name,
                method.as_str().into(),
                report.converged.to_string(),
                report.dc_iterations.to_string(),
                report.nr_iterations.to_string(),
                report.restarts.to_string(),
                format!("{:e}", report.final_residual_inf),
                report.clamp_activations.to_string(),
                secs(report.wall_time),
            ]);
            print!("{}", t.render(format));
            if let Some(path) = out {
                write(&path, &report.trace_tsv())?;
            }
            failure.map_or(Ok(()), |msg| Err(Failure::Numerical(msg)))
        }
        Command::Sample {
            grid,
            method,
            n,
            seed,
            out,
            tol,
            jacobian,
            format,
        } => {
            let (spec, dist, name) = load(&grid)?;
            if n == 0 {
                return Err(Failure::Usage("--n must be positive".into()));
            }
            let cfg = config(tol)?;
            let rng = RngStream::new(seed);
            let opts = GenerateOptions {
                parallel: true,
                log_jacobian: jacobian,
            };
            let data = match method {
                MethodArg::Direct => generate_direct(&spec, &dist, n, &cfg, &rng, opts),
                MethodArg::Is => generate_importance(&spec, &dist, n, &cfg, &rng, opts),
                _ => return Err(Failure::Usage("sample takes --method direct or is".into())),
            }
            .map_err(Failure::numerical)?;
            write(&out, &data.to_tsv(&spec))?;
            let tel = &data.telemetry;
            let mut t = Table::new(&[
                "grid",
                "generator",
                "samples",
                "esr",
                "acceptance_rate",
                "failures",
                "solver_iterations",
                "max_residual",
                "setup_s",
                "sampling_s",
            ]);
            t.row(vec![
                name,
                data.generator.as_str().into(),
                data.len().to_string(),
                format!("{:.4}", data.esr()),
                format!("{:.4}", tel.acceptance_rate()),
                tel.failures.to_string(),
                tel.solver_iterations.to_string(),
                format!("{:e}", tel.max_residual),
                secs(data.timing.setup),
                secs(data.timing.sampling),
            ]);
            print!("{}", t.render(format));
            Ok(())
        }
        Command::Bench {
            grid,
            n,
            seed,
            repeats,
            tol,
            format,
        } => {
            let (spec, dist, name) = load(&grid)?;
            if repeats == 0 || n.contains(&0) {
                return Err(Failure::Usage("--n and --repeats must be positive".into()));
            }
            let cfg = config(tol)?;
            let mut runs = Vec::new();
            for r in 0..repeats {
                let rows = benchmark(&spec, &dist, &n, &cfg, &RngStream::new(seed + r))
                    .map_err(Failure::numerical)?;
                runs.push(rows);
            }
            let mut t = Table::new(&[
                "grid",
                "n",
                "run",
                "sampling time direct [s]",
                "setup time IS [s]",
                "sampling time IS [s]",
                "ESR",
                "reduction factor",
            ]);
            for (i, &count) in n.iter().enumerate() {
                let rows: Vec<_> = runs.iter().map(|run| &run[i]).collect();
                for (r, row) in rows.iter().enumerate() {
                    t.row(vec![
                        name.clone(),
                        count.to_string(),
                        r.to_string(),
                        secs(row.direct_total),
                        secs(row.setup),
                        secs(row.importance_total),
                        format!("{:.4}", row.esr),
                        format!("{:.2}", row.reduction()),
                    ]);
                }
                if rows.len() > 1 {
                    let col = |f: &dyn Fn(&tpf_core::sampler::BenchRow) -> f64| {
                        rows.iter().map(|r| f(r)).collect::<Vec<_>>()
                    };
                    t.row(vec![
                        name.clone(),
                        count.to_string(),
                        "mean±std".into(),
                        mean_std(&col(&|r| r.direct_total.as_secs_f64()), 6),
                        mean_std(&col(&|r| r.setup.as_secs_f64()), 6),
                        mean_std(&col(&|r| r.importance_total.as_secs_f64()), 6),
                        mean_std(&col(&|r| r.esr), 4),
                        mean_std(&col(&|r| r.reduction()), 2),
                    ]);
                }
            }
            print!("{}", t.render(format));
            Ok(())
        }
        Command::Esr {
            grid,
            data,
            n,
            seed,
            repeats,
            format,
        } => {
            let (spec, dist, name) = load(&grid)?;
            let mut t = Table::new(&["grid", "run", "samples", "esr"]);
            if let Some(path) = data {
                let data = Dataset::from_tsv(&spec, &read(&path)?).map_err(Failure::numerical)?;
                t.row(vec![
                    name,
                    "file".into(),
                    data.len().to_string(),
                    format!("{:.4}", effective_sample_rate(&data.weights())),
                ]);
            } else {
                let (n, seed) = (n.unwrap_or(0), seed.unwrap_or(0));
                if n == 0 || repeats == 0 {
                    return Err(Failure::Usage("--n and --repeats must be positive".into()));
                }
                let cfg = SolverConfig::default();
                let mut values = Vec::new();
                for r in 0..repeats {
                    let data = generate_importance(
                        &spec,
                        &dist,
                        n,
                        &cfg,
                        &RngStream::new(seed + r),
                        GenerateOptions::default(),
                    )
                    .map_err(Failure::numerical)?;
                    values.push(data.esr());
                    t.row(vec![
                        name.clone(),
                        r.to_string(),
                        n.to_string(),
                        format!("{:.4}", data.esr()),
                    ]);
                }
                if values.len() > 1 {
                    t.row(vec![
                        name,
                        "mean±std".into(),
                        n.to_string(),
                        mean_std(&values, 4),
                    ]);
                }
            }
            print!("{}", t.render(format));
            Ok(())
        }
        Command::Validate { grid, data, tol } => {
            let (spec, _, name) = load(&grid)?;
            let Some(path) = data else {
                println!(
                    "{name}: valid grid, {} nodes, {} edges",
                    spec.node_count(),
                    spec.edge_count()
                );
                return Ok(());
            };
            let data = Dataset::from_tsv(&spec, &read(&path)?).map_err(Failure::numerical)?;
            let mut worst = 0.0_f64;
            for (i, s) in data.samples.iter().enumerate() {
                let r = residual(&spec, &s.state, &s.input).map_err(Failure::numerical)?;
                let r = norm_inf(&r);
                if r.is_nan() || r > tol {
                    return Err(Failure::Numerical(format!(
                        "sample {i}: residual {r:e} exceeds {tol:e}"
                    )));
                }
                worst = worst.max(r);
            }
            println!(
                "{name}: valid grid, {} samples within {tol:e} (worst {worst:e})",
                data.len()
            );
            Ok(())
        }
        Command::Golden { grid, seed, n, out } => {
            let (spec, dist, _) = load(&grid)?;
            if n == 0 {
                return Err(Failure::Usage("--n must be positive".into()));
            }
            let rng = RngStream::new(seed);
            let data = generate_direct(
                &spec,
                &dist,
                n.div_ceil(2),
                &SolverConfig::default(),
                &rng.substream(0),
                GenerateOptions::default(),
            )
            .map_err(Failure::numerical)?;
            let text = golden_residuals(&spec, &data, n, &mut rng.substream(1))
                .map_err(Failure::numerical)?;
            write(&out, &text)
        }
    }
}

/// Grid, distribution and a display name for either source.
fn load(args: &GridArgs) -> Result<(GridSpec, InputDistribution, String), Failure> {
    if let Some(name) = &args.instance {
        let inst: InstanceSpec = name.parse().map_err(|e| Failure::Usage(format!("{e}")))?;
        let (spec, dist) = inst.build().map_err(Failure::numerical)?;
        return Ok((spec, dist, inst.to_string()));
    }
    let path = args.grid.as_ref().expect("clap enforces one grid source");
    let spec = GridSpec::from_json(&read(path)?)
        .map_err(|e| Failure::Numerical(format!("{}: {e}", path.display())))?;
    let dist_path = match &args.dist {
        Some(p) => p.clone(),
        None => {
            let s = path.to_string_lossy();
            let stem = s.strip_suffix(".grid.json").unwrap_or(&s);
            PathBuf::from(format!("{stem}.dist.json"))
        }
    };
    let dist = InputDistribution::from_json(&read(&dist_path)?)
        .map_err(|e| Failure::Numerical(format!("{}: {e}", dist_path.display())))?;
    dist.check_grid(&spec)
        .map_err(|e| Failure::Numerical(format!("{}: {e}", dist_path.display())))?;
    let name = path.file_name().map_or_else(
        || path.display().to_string(),
        |f| f.to_string_lossy().into_owned(),
    );
    Ok((spec, dist, name))
}

fn config(tol: Option<f64>) -> Result<SolverConfig, Failure> {
    let mut cfg = SolverConfig::default();
    if let Some(tol) = tol {
        cfg.eps_da = tol;
        cfg.eps_nr = tol;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn secs(d: Duration) -> String {
    format!("{:.6}", d.as_secs_f64())
}

/// Sample standard deviation.
fn mean_std(v: &[f64], digits: usize) -> String {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut s = String::new();
    let _ = write!(s, "{mean:.digits$}±{:.digits$}", var.sqrt());
    s
}
