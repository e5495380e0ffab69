use bope_cli::bench::{self, BenchOptions, Suite, MANIFEST_FILE};
use bope_cli::plots::{self, Metric, XAxis};
use bope_cli::CliError;
use bope_core::acquisition::PeStrategy;
use bope_core::config::{Budgets, ExperimentStrategy, LoopConfig, Schedule};
use bope_core::problems::{calibrate_probit_lambda, Benchmark};
use bope_core::runner::run_bope;
use bope_core::session::{events_to_jsonl, metrics_to_csv};
use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "bope", version, about = "Bayesian optimization with preference exploration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulated BOPE loop and write its event log and metrics.
    Run(RunArgs),
    /// Run a benchmark suite over several replications.
    Bench(BenchArgs),
    /// Find the probit noise level giving a target comparison error rate.
    Calibrate(CalibrateArgs),
    /// Serve the HTTP session API.
    Serve(ServeArgs),
    /// Turn a summary CSV into plot series of (x, mean, sem).
    ExportPlots(ExportArgs),
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// JSON document with loop configuration fields; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long)]
    pe_strategy: Option<String>,
    #[arg(long)]
    experiment_strategy: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    comparisons: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    replication: usize,
    /// Use the small desk-scale optimizer and fitting budgets.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    no_timing: bool,
    #[arg(long, default_value = "bope-run")]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct BenchArgs {
    /// single-pe-stage, multi-stage, one-shot or probit-noise.
    #[arg(long, required_unless_present = "manifest")]
    suite: Option<String>,
    /// Comma-separated strategy ids; the suite's defaults when omitted.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<String>,
    /// Comma-separated benchmark ids such as vehicle-safety/kumaraswamy.
    #[arg(long, value_delimiter = ',')]
    benchmarks: Vec<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    comparisons: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    /// Published replication counts and full budgets. Slow.
    #[arg(long)]
    paper_scale: bool,
    /// JSON file with budgets replacing the desk defaults.
    #[arg(long, conflicts_with = "paper_scale")]
    budgets: Option<PathBuf>,
    /// Record zero acquisition times so that reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
    /// Rerun the plan stored in a manifest instead of building one.
    #[arg(long, conflicts_with_all = ["suite", "strategies", "benchmarks", "reps", "seed", "paper_scale", "budgets"])]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "bope-bench")]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct CalibrateArgs {
    #[arg(long)]
    benchmark: String,
    #[arg(long, default_value_t = bench::PROBIT_TARGET_ERROR)]
    target: f64,
    #[arg(long, default_value_t = bench::CALIBRATION_DESIGNS)]
    designs: usize,
    #[arg(long, default_value_t = bench::CALIBRATION_PAIRS)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, clap::Args)]
struct ServeArgs {
    /// TOML service configuration; BOPE_* environment variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    storage_dir: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct ExportArgs {
    /// Summary CSV written by `bench`.
    input: PathBuf,
    /// best-guess or max-observed.
    #[arg(long, default_value = "max-observed")]
    metric: String,
    /// comparisons, evaluations or checkpoint; follows the metric when omitted.
    #[arg(long)]
    x: Option<String>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Bench(a) => run_bench(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Serve(a) => serve(a),
        Command::ExportPlots(a) => export_plots(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("invalid {}: {e}", path.display())))
}

fn parse<T: std::str::FromStr<Err = bope_core::BopeError>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(CliError::from)
}

fn run(a: RunArgs) -> Result<(), CliError> {
    let mut cfg: LoopConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => LoopConfig::default(),
    };
    if let Some(b) = a.benchmark {
        cfg.benchmark = Some(b);
    }
    if let Some(s) = &a.pe_strategy {
        cfg.pe_strategy = parse::<PeStrategy>(s)?;
    }
    if let Some(s) = &a.experiment_strategy {
        cfg.experiment_strategy = parse::<ExperimentStrategy>(s)?;
    }
    if let Some(s) = &a.schedule {
        cfg.schedule = parse::<Schedule>(s)?;
    }
    if let Some(c) = a.comparisons {
        cfg.comparisons_per_stage = c;
    }
    if let Some(b) = a.batches {
        cfg.n_batches = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.desk {
        cfg.budgets = Budgets { report_best_guess: cfg.budgets.report_best_guess, ..Budgets::desk() };
    }
    if a.no_timing {
        cfg.budgets.record_timing = false;
    }
    cfg.validate()?;
    let outcome = run_bope(&cfg, a.replication)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("events.jsonl"), events_to_jsonl(&outcome.events)?)?;
    fs::write(a.out.join("metrics.csv"), metrics_to_csv(&outcome.metrics)?)?;
    if let Some(e) = outcome.error {
        return Err(CliError::Runtime(format!("run stopped early: {e}")));
    }
    if let Some(last) = outcome.metrics.last() {
        println!(
            "{} {}: {} comparisons, {} evaluations, max utility {}",
            cfg.benchmark.as_deref().unwrap_or("custom"),
            cfg.label(),
            last.comparisons,
            last.evaluations,
            last.util_max_observed.map_or("n/a".into(), |u| format!("{u:.4}"))
        );
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<(), CliError> {
    let plan = match &a.manifest {
        Some(p) => bench::read_manifest(p)?.plan,
        None => {
            let suite: Suite = a.suite.as_deref().unwrap_or_default().parse()?;
            let mut o = BenchOptions::new(suite);
            if !a.strategies.is_empty() {
                o.strategies = a.strategies;
            }
            if !a.benchmarks.is_empty() {
                o.benchmarks = a.benchmarks;
            }
            o.seed = a.seed;
            o.comparisons = a.comparisons;
            o.n_batches = a.batches;
            if a.paper_scale {
                log::warn!(
                    "--paper-scale runs {} replications with full budgets; expect many hours",
                    suite.paper_reps()
                );
                o.n_reps = suite.paper_reps();
                o.budgets = Budgets::default();
            }
            if let Some(p) = &a.budgets {
                o.budgets = read_json(p)?;
                o.budgets.validate()?;
            }
            if let Some(r) = a.reps {
                o.n_reps = r;
            }
            o.budgets.record_timing = !a.no_timing;
            bench::plan(&o)?
        }
    };
    let manifest = bench::execute(&plan, a.jobs, &a.out)?;
    for f in &manifest.files {
        println!("{}", a.out.join(&f.path).display());
    }
    println!("{}", a.out.join(MANIFEST_FILE).display());
    if !manifest.failures.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} replications failed; see {}",
            manifest.failures.len(),
            a.out.join(MANIFEST_FILE).display()
        )));
    }
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<(), CliError> {
    let benchmark = Benchmark::by_name(&a.benchmark)?;
    let cal = calibrate_probit_lambda(&benchmark, a.target, a.designs, a.pairs, a.seed)?;
    println!("{}", serde_json::to_string_pretty(&cal).map_err(|e| CliError::Runtime(e.to_string()))?);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let mut cfg = bope_service::config::ServiceConfig::load(a.config.as_deref())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(b) = a.bind {
        cfg.bind = b;
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if let Some(d) = a.storage_dir {
        cfg.storage_dir = d;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(bope_service::serve(cfg)).map_err(|e| CliError::Runtime(e.to_string()))
}

fn export_plots(a: ExportArgs) -> Result<(), CliError> {
    let metric: Metric = a.metric.parse()?;
    let axis = match &a.x {
        Some(x) => x.parse()?,
        None => XAxis::for_metric(metric),
    };
    let text = fs::read_to_string(&a.input)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", a.input.display())))?;
    let rows = plots::summary_from_csv(&text)?;
    let out = plots::points_to_csv(&plots::plot_points(&rows, metric, axis))?;
    match &a.out {
        Some(p) => fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}
