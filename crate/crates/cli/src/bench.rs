//! Benchmark suites: plans of loop configurations run over shared
//! replication seeds, with summary, per-replication and plot-data files
//! plus a manifest from which every file can be regenerated.

use crate::plots::{self, Metric, XAxis};
use crate::{sha256_hex, CliError};
use bope_core::acquisition::PeStrategy;
use bope_core::config::{Budgets, ExperimentStrategy, LoopConfig, Schedule};
use bope_core::problems::{calibrate_probit_lambda, Benchmark, DmNoise};
use bope_core::qmc::derive_seed;
use bope_core::runner::{replication_seed, rows_to_csv, run_replications, summarize, summary_to_csv};
use bope_core::session::{MetricRow, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

/// The four benchmarks of the main experiments.
pub const MAIN_BENCHMARKS: [&str; 4] =
    ["vehicle-safety/kumaraswamy", "dtlz2/l1", "osy/piecewise-linear", "car-cab/piecewise-linear"];

/// Strategy ids that are not PE strategies.
pub const BASELINE_IDS: [&str; 2] = ["true-utility", "sobol-only"];

/// Target comparison error rate of the probit suite.
pub const PROBIT_TARGET_ERROR: f64 = 0.1;
pub const CALIBRATION_DESIGNS: usize = 10_000;
pub const CALIBRATION_PAIRS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// One PE stage after the initial batch; best guess every 5 comparisons.
    SinglePeStage,
    /// PE stages interleaved with experiment batches.
    MultiStage,
    /// All comparisons in one stage, compared against the interleaved schedule.
    OneShot,
    /// Multi-stage runs under probit comparison noise.
    ProbitNoise,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::SinglePeStage, Suite::MultiStage, Suite::OneShot, Suite::ProbitNoise];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::SinglePeStage => "single-pe-stage",
            Suite::MultiStage => "multi-stage",
            Suite::OneShot => "one-shot",
            Suite::ProbitNoise => "probit-noise",
        }
    }

    pub fn default_strategies(self) -> &'static [&'static str] {
        match self {
            Suite::SinglePeStage => {
                &["eubo-zeta", "eubo-ftilde", "eubo-y0", "bald-ftilde", "bald-y0", "random-ftilde", "random-y0"]
            }
            Suite::MultiStage => {
                &["eubo-zeta", "eubo-ftilde", "bald-ftilde", "random-ftilde", "pbo-ts", "true-utility", "sobol-only"]
            }
            Suite::OneShot => &["eubo-zeta", "eubo-ftilde", "bald-ftilde", "random-ftilde", "pbo-ts"],
            Suite::ProbitNoise => &["eubo-zeta", "eubo-ftilde", "bald-ftilde", "pbo-eubo", "pbo-ts"],
        }
    }

    /// Replication count of the published experiments.
    pub fn paper_reps(self) -> usize {
        match self {
            Suite::SinglePeStage => 100,
            _ => 30,
        }
    }

    pub fn metric(self) -> Metric {
        match self {
            Suite::SinglePeStage => Metric::BestGuess,
            _ => Metric::MaxObserved,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Suite::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Suite::ALL.iter().map(|x| x.as_str()).collect();
            CliError::Validation(format!("unknown suite '{s}'; valid: {}", valid.join(", ")))
        })
    }
}

/// Every strategy id accepted by `bench`.
pub fn valid_strategy_ids() -> Vec<&'static str> {
    PeStrategy::ALL
        .iter()
        .filter(|p| **p != PeStrategy::None)
        .map(|p| p.as_str())
        .chain(BASELINE_IDS)
        .collect()
}

/// Maps a strategy id to its PE and experiment strategies.
pub fn parse_strategy(id: &str) -> Result<(PeStrategy, ExperimentStrategy), CliError> {
    match id {
        "true-utility" => return Ok((PeStrategy::None, ExperimentStrategy::QneiTrueUtility)),
        "sobol-only" => return Ok((PeStrategy::None, ExperimentStrategy::SobolOnly)),
        _ => {}
    }
    match id.parse::<PeStrategy>() {
        Ok(PeStrategy::None) | Err(_) => Err(CliError::Validation(format!(
            "unknown strategy '{id}'; valid: {}",
            valid_strategy_ids().join(", ")
        ))),
        Ok(pe @ (PeStrategy::PboTs | PeStrategy::PboEubo)) => Ok((pe, ExperimentStrategy::PboQnei)),
        Ok(pe) => Ok((pe, ExperimentStrategy::Qneiuu)),
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub suite: Suite,
    pub strategies: Vec<String>,
    pub benchmarks: Vec<String>,
    pub n_reps: usize,
    pub seed: u64,
    pub budgets: Budgets,
    /// Comparisons per PE stage; the suite's default when `None`.
    pub comparisons: Option<usize>,
    pub n_batches: Option<usize>,
    pub flip_probability: f64,
}

impl BenchOptions {
    pub fn new(suite: Suite) -> Self {
        Self {
            suite,
            strategies: suite.default_strategies().iter().map(|s| s.to_string()).collect(),
            benchmarks: MAIN_BENCHMARKS.iter().map(|s| s.to_string()).collect(),
            n_reps: 10,
            seed: 0,
            budgets: Budgets::desk(),
            comparisons: None,
            n_batches: None,
            flip_probability: 0.1,
        }
    }
}

/// Everything needed to regenerate a suite's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub suite: Suite,
    pub n_reps: usize,
    /// Seed from which every replication seed is derived.
    pub base_seed: u64,
    /// Configurations grouped by benchmark; each runs `n_reps` replications.
    pub runs: BTreeMap<String, Vec<LoopConfig>>,
}

/// Builds the plan of a suite. The probit suite calibrates its noise here.
pub fn plan(opts: &BenchOptions) -> Result<BenchPlan, CliError> {
    if opts.n_reps < 2 {
        return Err(CliError::Validation("--reps must be at least 2".into()));
    }
    if opts.strategies.is_empty() || opts.benchmarks.is_empty() {
        return Err(CliError::Validation("at least one strategy and one benchmark are needed".into()));
    }
    let strategies: Vec<(PeStrategy, ExperimentStrategy)> =
        opts.strategies.iter().map(|s| parse_strategy(s)).collect::<Result<_, _>>()?;
    if opts.suite == Suite::SinglePeStage {
        if let Some(id) = opts.strategies.iter().find(|s| BASELINE_IDS.contains(&s.as_str())) {
            return Err(CliError::Validation(format!("suite single-pe-stage compares PE strategies; '{id}' is not one")));
        }
    }
    let mut runs = BTreeMap::new();
    for name in &opts.benchmarks {
        let benchmark = Benchmark::by_name(name)?;
        let noise = match opts.suite {
            Suite::ProbitNoise => {
                let seed = derive_seed(opts.seed, 0xCA11);
                let cal = calibrate_probit_lambda(
                    &benchmark,
                    PROBIT_TARGET_ERROR,
                    CALIBRATION_DESIGNS,
                    CALIBRATION_PAIRS,
                    seed,
                )?;
                DmNoise::Probit { lambda: cal.lambda }
            }
            _ => DmNoise::ConstantFlip { p: opts.flip_probability },
        };
        let mut configs = Vec::new();
        for &(pe, ex) in &strategies {
            let schedules: &[Schedule] = match opts.suite {
                Suite::SinglePeStage => &[Schedule::PeOnly],
                Suite::OneShot if pe != PeStrategy::None => &[Schedule::SingleStage, Schedule::Interleaved],
                _ => &[Schedule::Interleaved],
            };
            for &schedule in schedules {
                let mut budgets = opts.budgets.clone();
                budgets.report_best_guess = opts.suite == Suite::SinglePeStage;
                let mut cfg = LoopConfig {
                    benchmark: Some(name.clone()),
                    pe_strategy: pe,
                    experiment_strategy: ex,
                    schedule,
                    dm_noise: noise,
                    seed: opts.seed,
                    budgets,
                    ..LoopConfig::default()
                };
                if let Some(c) = opts.comparisons {
                    cfg.comparisons_per_stage = c;
                }
                if let Some(b) = opts.n_batches {
                    cfg.n_batches = b;
                }
                cfg.validate()?;
                configs.push(cfg);
            }
        }
        runs.insert(name.clone(), configs);
    }
    Ok(BenchPlan { suite: opts.suite, n_reps: opts.n_reps, base_seed: opts.seed, runs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub benchmark: String,
    pub strategy: String,
    pub schedule: String,
    pub config_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFailure {
    pub benchmark: String,
    pub strategy: String,
    pub schedule: String,
    pub replication: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub plan: BenchPlan,
    pub plan_sha256: String,
    pub replication_seeds: Vec<u64>,
    pub runs: Vec<ManifestRun>,
    pub files: Vec<ManifestFile>,
    pub failures: Vec<ManifestFailure>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sha_of<T: Serialize>(value: &T) -> Result<String, CliError> {
    let bytes = serde_json::to_vec(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(sha256_hex(&bytes))
}

/// File stem of a benchmark's outputs.
pub fn file_stem(benchmark: &str) -> String {
    benchmark.replace('/', "__")
}

/// Runs a plan and writes, per benchmark, `<stem>.csv` (summary),
/// `<stem>.rows.csv` (per replication) and `<stem>.plot.csv`, then
/// `manifest.json`. Failed replications are listed in the manifest.
pub fn execute(plan: &BenchPlan, jobs: usize, out_dir: &Path) -> Result<Manifest, CliError> {
    fs::create_dir_all(out_dir)?;
    let metric = plan.suite.metric();
    let mut manifest_runs = Vec::new();
    let mut files = Vec::new();
    let mut failures = Vec::new();
    for (benchmark, configs) in &plan.runs {
        let mut rows: Vec<MetricRow> = Vec::new();
        for cfg in configs {
            let cfg = LoopConfig { seed: plan.base_seed, ..cfg.clone() };
            log::info!("{} {} {}: {} replications", benchmark, cfg.label(), cfg.schedule.as_str(), plan.n_reps);
            let reps = run_replications(&cfg, plan.n_reps, jobs)?;
            for (replication, error) in reps.failures {
                failures.push(ManifestFailure {
                    benchmark: benchmark.clone(),
                    strategy: cfg.label(),
                    schedule: cfg.schedule.as_str().into(),
                    replication,
                    error,
                });
            }
            manifest_runs.push(ManifestRun {
                benchmark: benchmark.clone(),
                strategy: cfg.label(),
                schedule: cfg.schedule.as_str().into(),
                config_sha256: sha_of(&cfg)?,
            });
            rows.extend(reps.rows);
        }
        let summary = summarize(&rows);
        let points = plots::plot_points(&summary, metric, XAxis::for_metric(metric));
        let stem = file_stem(benchmark);
        for (name, text) in [
            (format!("{stem}.csv"), summary_to_csv(&summary)?),
            (format!("{stem}.rows.csv"), rows_to_csv(&rows)?),
            (format!("{stem}.plot.csv"), plots::points_to_csv(&points)?),
        ] {
            fs::write(out_dir.join(&name), &text)?;
            files.push(ManifestFile { path: name, sha256: sha256_hex(text.as_bytes()) });
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        plan: plan.clone(),
        plan_sha256: sha_of(plan)?,
        replication_seeds: (0..plan.n_reps).map(|r| replication_seed(plan.base_seed, r)).collect(),
        runs: manifest_runs,
        files,
        failures,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(out_dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("invalid manifest {}: {e}", path.display())))
}
