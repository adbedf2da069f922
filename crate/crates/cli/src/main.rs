use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use kdebench_core::eval::{self, ExperimentConfig};
use kdebench_core::seed::derive_seed;
use kdebench_core::{
    gamma_from_sigma, DatasetName, DensityEstimator, Error, EstimatorConfig, Model, PointSet,
    RankRule, SyntheticSpec,
};

/// Kernel density estimation benchmark: exact, tree and density-matrix estimators.
#[derive(Parser)]
#[command(name = "kdebench", version)]
struct Cli {
    /// Worker threads (default: KDEBENCH_THREADS, else one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic data set to CSV.
    Generate {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit an estimator on a CSV and save the model.
    #[command(allow_negative_numbers = true)]
    Fit {
        /// Training points (CSV).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        est: EstimatorArgs,
        /// Kernel bandwidth gamma; cross-validated if neither this nor --sigma is given.
        #[arg(long, conflicts_with = "sigma")]
        gamma: Option<f64>,
        /// Kernel width sigma, gamma = 1/(2 sigma^2).
        #[arg(long)]
        sigma: Option<f64>,
        /// Random Fourier feature count; cross-validated over {50,100,500,1000} if omitted.
        #[arg(long)]
        rff_d: Option<usize>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on query points.
    Estimate {
        #[arg(long)]
        model: PathBuf,
        /// Query points (CSV).
        #[arg(long)]
        queries: PathBuf,
        /// Output CSV with a `density` column (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the MAE / timing grid and write reports.
    #[command(allow_negative_numbers = true)]
    Benchmark {
        /// Built-in grid: `desk` or `paper` (the latter takes many hours).
        #[arg(long, default_value = "desk")]
        preset: String,
        /// JSON experiment config; missing fields fall back to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        dataset: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        estimator: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        #[arg(long)]
        test_n: Option<usize>,
        /// Skip cross-validation and use this bandwidth.
        #[arg(long, conflicts_with = "sigma")]
        gamma: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Skip the feature-count search and use this many features.
        #[arg(long)]
        rff_d: Option<usize>,
        #[arg(long)]
        rank: Option<RankRule>,
        #[arg(long)]
        atol: Option<f64>,
        #[arg(long)]
        rtol: Option<f64>,
        #[arg(long)]
        leaf_size: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Timed prediction runs per cell.
        #[arg(long)]
        repeats: Option<usize>,
        /// Independent repetitions of every cell.
        #[arg(long)]
        replicates: Option<usize>,
        /// Output directory for report.csv, report.jsonl and aggregate.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EstimatorArgs {
    /// raw | naive | tree-kd | tree-midpoint | tree-ball | dmkde | dmkde-lr
    #[arg(long, default_value = "raw")]
    estimator: String,
    /// Low-rank rule: `auto`, `full` or a rank.
    #[arg(long, default_value = "auto")]
    rank: RankRule,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    leaf_size: Option<usize>,
}

impl EstimatorArgs {
    fn config(&self) -> Result<EstimatorConfig, Failure> {
        let mut c = EstimatorConfig::new(self.estimator.parse()?);
        c.rank = self.rank;
        if let Some(a) = self.atol {
            c.atol = a;
        }
        if let Some(r) = self.rtol {
            c.rtol = r;
        }
        if let Some(l) = self.leaf_size {
            c.leaf_size = l;
        }
        Ok(c)
    }
}

/// An error message paired with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Domain(_) | Error::Shape { .. } | Error::Data(_) => 2,
            Error::Io(_) => 3,
            Error::Csv(c) if c.is_io_error() => 3,
            Error::Json(j) if j.is_io() => 3,
            Error::Csv(_) | Error::Json(_) => 2,
            Error::State(_) | Error::Internal(_) => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("kdebench: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Generate {
            dataset,
            n,
            seed,
            out,
        } => generate(&dataset, n, seed, out.as_deref()),
        Command::Fit {
            data,
            est,
            gamma,
            sigma,
            rff_d,
            folds,
            seed,
            out,
        } => fit(
            &data,
            &est,
            resolve_gamma(gamma, sigma)?,
            rff_d,
            folds,
            seed,
            &out,
        ),
        Command::Estimate {
            model,
            queries,
            out,
        } => estimate(&model, &queries, out.as_deref()),
        Command::Benchmark {
            preset,
            config,
            dataset,
            estimator,
            n,
            test_n,
            gamma,
            sigma,
            rff_d,
            rank,
            atol,
            rtol,
            leaf_size,
            folds,
            seed,
            repeats,
            replicates,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => serde_json::from_reader(File::open(path)?).map_err(Error::from)?,
                None => match preset.as_str() {
                    "desk" => ExperimentConfig::desk(),
                    "paper" => ExperimentConfig::paper(),
                    other => return Err(Failure::usage(format!("unknown preset {other:?}"))),
                },
            };
            if !dataset.is_empty() {
                cfg.datasets = dataset
                    .iter()
                    .map(|d| d.parse())
                    .collect::<Result<_, Error>>()?;
            }
            if !estimator.is_empty() {
                cfg.estimators = estimator
                    .iter()
                    .map(|e| e.parse().map(EstimatorConfig::new))
                    .collect::<Result<_, Error>>()?;
            }
            for e in &mut cfg.estimators {
                if let Some(r) = rank {
                    e.rank = r;
                }
                if let Some(a) = atol {
                    e.atol = a;
                }
                if let Some(r) = rtol {
                    e.rtol = r;
                }
                if let Some(l) = leaf_size {
                    e.leaf_size = l;
                }
            }
            if !n.is_empty() {
                cfg.sizes = n;
            }
            if let Some(m) = test_n {
                cfg.test_size = m;
            }
            if let Some(g) = resolve_gamma(gamma, sigma)? {
                cfg.fixed_gamma = Some(g);
            }
            if rff_d.is_some() {
                cfg.fixed_features = rff_d;
            }
            if let Some(f) = folds {
                cfg.folds = f;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(r) = repeats {
                cfg.timing_repeats = r;
            }
            if let Some(r) = replicates {
                cfg.seeds = r;
            }
            benchmark(&cfg, &out)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), Failure> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var("KDEBENCH_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| {
                Failure::usage(format!("KDEBENCH_THREADS={v:?} is not a thread count"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Failure::usage("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure {
                code: 4,
                message: e.to_string(),
            })?;
    }
    Ok(())
}

fn resolve_gamma(gamma: Option<f64>, sigma: Option<f64>) -> Result<Option<f64>, Failure> {
    match (gamma, sigma) {
        (Some(g), _) if !(g > 0.0 && g.is_finite()) => {
            Err(Failure::usage(format!("gamma must be positive, got {g}")))
        }
        (Some(g), _) => Ok(Some(g)),
        (None, Some(s)) => Ok(Some(gamma_from_sigma(s)?)),
        (None, None) => Ok(None),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn generate(dataset: &str, n: usize, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let name: DatasetName = dataset.parse()?;
    if n == 0 {
        return Err(Failure::usage("--n must be positive"));
    }
    let spec = SyntheticSpec::new(name, derive_seed(seed, &["spec", name.as_str()]));
    let points = spec.sample(n, seed)?;
    let mut w = output(out)?;
    points.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn fit(
    data: &Path,
    est: &EstimatorArgs,
    gamma: Option<f64>,
    rff_d: Option<usize>,
    folds: usize,
    seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let config = est.config()?;
    let train = PointSet::load_csv(data)?;
    if train.is_empty() {
        return Err(Failure::usage(format!(
            "{} contains no points",
            data.display()
        )));
    }
    let needs_cv = gamma.is_none() || (config.kind.uses_rff() && rff_d.is_none());
    let (gamma, features) = if needs_cv {
        let gammas = gamma.map_or_else(|| eval::gamma_grid(-10, 10), |g| vec![g]);
        let feature_grid = rff_d.map_or_else(|| vec![50, 100, 500, 1000], |d| vec![d]);
        let cv = eval::cross_validate(
            &train,
            &config,
            &gammas,
            &feature_grid,
            folds.min(train.len()),
            seed,
        )?;
        info!(
            "cross-validated gamma={} features={:?}",
            cv.best_gamma, cv.best_features
        );
        (cv.best_gamma, cv.best_features.or(rff_d).unwrap_or(0))
    } else {
        (gamma.unwrap_or_default(), rff_d.unwrap_or(0))
    };
    let start = Instant::now();
    let model = Model::fit(
        &config,
        &train,
        gamma,
        features,
        derive_seed(seed, &["rff"]),
    )?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    model.save(out)?;
    println!(
        "fitted {} on {} points (gamma={gamma}) in {elapsed:.3} ms",
        config.kind,
        train.len()
    );
    Ok(())
}

fn estimate(model: &Path, queries: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let model = Model::load(model)?;
    let queries = PointSet::load_csv(queries)?;
    let values = if queries.is_empty() {
        Vec::new()
    } else {
        model.estimate_batch(&queries)?
    };
    let mut w = output(out)?;
    writeln!(w, "density")?;
    for v in values {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

fn benchmark(config: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let reports = eval::run_experiment_grid(config)?;
    eval::write_reports_csv(
        &reports,
        BufWriter::new(File::create(out.join("report.csv"))?),
    )?;
    eval::write_reports_jsonl(
        &reports,
        BufWriter::new(File::create(out.join("report.jsonl"))?),
    )?;
    let aggregate = eval::aggregate(&reports);
    eval::write_aggregate_csv(
        &aggregate,
        BufWriter::new(File::create(out.join("aggregate.csv"))?),
    )?;
    let failed = reports.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} cells ({} failed); reports written to {}",
        reports.len(),
        failed,
        out.display()
    );
    if failed == reports.len() {
        return Err(Failure {
            code: 4,
            message: "every cell failed".into(),
        });
    }
    Ok(())
}
