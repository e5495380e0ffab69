//! Run configuration for the BOPE loop.

use crate::acquisition::{PeStrategy, BEST_GUESS_SAMPLES};
use crate::error::{validation, BopeError, Result};
use crate::gp::FitConfig;
use crate::optim::{Bounds, OptimizerConfig};
use crate::pref::PrefFitConfig;
use crate::problems::{Benchmark, DmNoise, Y0_DEFAULT_SAMPLES};
use crate::qnei::{BatchMode, QneiConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentStrategy {
    Qneiuu,
    QneiTrueUtility,
    SobolOnly,
    PboQnei,
}

impl ExperimentStrategy {
    pub const ALL: [ExperimentStrategy; 4] =
        [ExperimentStrategy::Qneiuu, ExperimentStrategy::QneiTrueUtility, ExperimentStrategy::SobolOnly, ExperimentStrategy::PboQnei];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentStrategy::Qneiuu => "qneiuu",
            ExperimentStrategy::QneiTrueUtility => "qnei-true-utility",
            ExperimentStrategy::SobolOnly => "sobol-only",
            ExperimentStrategy::PboQnei => "pbo-qnei",
        }
    }
}

impl fmt::Display for ExperimentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentStrategy {
    type Err = BopeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|e| e.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|e| e.as_str()).collect();
            BopeError::Validation(format!("unknown experiment strategy '{s}'; valid: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// init → {PE stage → batch} × n_batches
    Interleaved,
    /// init → one PE stage with all comparisons → n_batches batches
    SingleStage,
    /// init → one PE stage, no further batches
    PeOnly,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Interleaved => "interleaved",
            Schedule::SingleStage => "single-stage",
            Schedule::PeOnly => "pe-only",
        }
    }
}

impl FromStr for Schedule {
    type Err = BopeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interleaved" => Ok(Schedule::Interleaved),
            "single-stage" => Ok(Schedule::SingleStage),
            "pe-only" => Ok(Schedule::PeOnly),
            _ => validation(format!("unknown schedule '{s}'; valid: interleaved, single-stage, pe-only")),
        }
    }
}

/// Computational budgets of the model fits and acquisition solves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub query_optimizer: OptimizerConfig,
    pub batch_optimizer: OptimizerConfig,
    pub best_guess_optimizer: OptimizerConfig,
    pub qnei: QneiConfig,
    pub batch_mode: BatchMode,
    pub outcome_fit: FitConfig,
    pub pref_fit: PrefFitConfig,
    pub best_guess_samples: usize,
    pub report_best_guess: bool,
    pub y0_samples: usize,
    pub n_basis: usize,
    /// Record wall-clock acquisition times (zero when disabled, for byte-stable output).
    pub record_timing: bool,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            query_optimizer: OptimizerConfig::default(),
            batch_optimizer: OptimizerConfig { n_raw_samples: 512, ..OptimizerConfig::default() },
            best_guess_optimizer: OptimizerConfig::default(),
            qnei: QneiConfig::default(),
            batch_mode: BatchMode::Joint,
            outcome_fit: FitConfig::default(),
            pref_fit: PrefFitConfig::default(),
            best_guess_samples: BEST_GUESS_SAMPLES,
            report_best_guess: true,
            y0_samples: Y0_DEFAULT_SAMPLES,
            n_basis: crate::paths::DEFAULT_N_BASIS,
            record_timing: true,
        }
    }
}

impl Budgets {
    /// Reduced budgets for many-replication runs on a single workstation.
    pub fn desk() -> Self {
        let small = OptimizerConfig { n_restarts: 2, n_raw_samples: 64, max_iters: 40, grad_tol: 1e-5, seed: 0 };
        Self {
            query_optimizer: small.clone(),
            batch_optimizer: OptimizerConfig { n_restarts: 1, n_raw_samples: 64, max_iters: 15, ..small.clone() },
            best_guess_optimizer: small,
            qnei: QneiConfig { n_f: 16, n_g: 8, seed: 0 },
            batch_mode: BatchMode::SequentialGreedy,
            outcome_fit: FitConfig { n_restarts: 2, max_iters: 60, ..FitConfig::default() },
            pref_fit: PrefFitConfig { n_restarts: 1, max_iters: 20, seed: 0 },
            best_guess_samples: BEST_GUESS_SAMPLES,
            report_best_guess: true,
            y0_samples: 100_000,
            n_basis: crate::paths::DEFAULT_N_BASIS,
            record_timing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.query_optimizer.validate()?;
        self.batch_optimizer.validate()?;
        self.best_guess_optimizer.validate()?;
        if self.qnei.n_f == 0 || self.qnei.n_g == 0 || self.best_guess_samples == 0 || self.n_basis == 0 {
            return validation("sample counts must be positive");
        }
        if self.y0_samples < 10_000 {
            return validation("y0_samples must be at least 10^4");
        }
        Ok(())
    }
}

/// A design space supplied directly instead of a benchmark problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomSpace {
    pub bounds: Bounds,
    pub k: usize,
    #[serde(default)]
    pub input_names: Vec<String>,
    #[serde(default)]
    pub outcome_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Benchmark name such as `"vehicle-safety/kumaraswamy"`.
    pub benchmark: Option<String>,
    /// Design space for live sessions without a benchmark.
    pub space: Option<CustomSpace>,
    pub pe_strategy: PeStrategy,
    pub experiment_strategy: ExperimentStrategy,
    pub initial_batch: Option<usize>,
    pub batch_size: Option<usize>,
    pub comparisons_per_stage: usize,
    pub n_batches: usize,
    pub schedule: Schedule,
    pub dm_noise: DmNoise,
    pub seed: u64,
    /// Label used in metric tables; derived from the strategies when absent.
    pub label: Option<String>,
    pub budgets: Budgets,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            benchmark: Some("vehicle-safety/kumaraswamy".into()),
            space: None,
            pe_strategy: PeStrategy::EuboFtilde,
            experiment_strategy: ExperimentStrategy::Qneiuu,
            initial_batch: None,
            batch_size: None,
            comparisons_per_stage: 25,
            n_batches: 3,
            schedule: Schedule::Interleaved,
            dm_noise: DmNoise::ConstantFlip { p: 0.1 },
            seed: 0,
            label: None,
            budgets: Budgets::default(),
        }
    }
}

impl LoopConfig {
    pub fn benchmark(&self) -> Result<Option<Benchmark>> {
        self.benchmark.as_deref().map(Benchmark::by_name).transpose()
    }

    pub fn bounds_and_k(&self) -> Result<(Bounds, usize)> {
        match (self.benchmark()?, &self.space) {
            (Some(b), None) => Ok((b.problem.bounds.clone(), b.problem.k)),
            (None, Some(s)) => Ok((s.bounds.clone(), s.k)),
            (Some(_), Some(_)) => validation("give either a benchmark or a custom space, not both"),
            (None, None) => validation("a benchmark or a custom space is required"),
        }
    }

    /// Initial design count: 16 for five or fewer inputs, else 32.
    pub fn initial_batch_size(&self) -> Result<usize> {
        let (bounds, _) = self.bounds_and_k()?;
        Ok(self.initial_batch.unwrap_or(if bounds.dim() <= 5 { 16 } else { 32 }))
    }

    /// Batch size: 8 for vehicle safety, else 16.
    pub fn batch_size(&self) -> usize {
        self.batch_size
            .unwrap_or(if self.benchmark.as_deref().is_some_and(|b| b.starts_with("vehicle-safety")) { 8 } else { 16 })
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match self.experiment_strategy {
            ExperimentStrategy::Qneiuu | ExperimentStrategy::PboQnei => self.pe_strategy.as_str().to_string(),
            ExperimentStrategy::QneiTrueUtility => "true-utility".into(),
            ExperimentStrategy::SobolOnly if self.pe_strategy == PeStrategy::None => "sobol-only".into(),
            ExperimentStrategy::SobolOnly => format!("{}+sobol", self.pe_strategy),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (bounds, k) = self.bounds_and_k()?;
        if bounds.dim() == 0 || k == 0 {
            return validation("design and outcome dimensions must be positive");
        }
        if bounds.lower.iter().zip(&bounds.upper).any(|(l, u)| !(l < u)) {
            return validation("design bounds need lower < upper in every dimension");
        }
        if self.comparisons_per_stage == 0 && self.pe_strategy != PeStrategy::None {
            return validation("comparisons_per_stage must be at least 1");
        }
        if self.initial_batch == Some(0) || self.batch_size == Some(0) {
            return validation("batch sizes must be at least 1");
        }
        if self.initial_batch_size()? < 2 {
            return validation("the initial batch needs at least 2 designs");
        }
        self.dm_noise.validate()?;
        self.budgets.validate()?;
        let pbo_pe = self.pe_strategy.is_pbo();
        let pbo_exp = self.experiment_strategy == ExperimentStrategy::PboQnei;
        if pbo_pe != pbo_exp {
            return validation("PBO preference strategies and the pbo-qnei experiment strategy go together");
        }
        if self.experiment_strategy == ExperimentStrategy::Qneiuu && self.pe_strategy == PeStrategy::None {
            return validation("qneiuu needs a preference-exploration strategy");
        }
        if self.experiment_strategy == ExperimentStrategy::QneiTrueUtility && self.benchmark.is_none() {
            return validation("qnei-true-utility needs a benchmark utility");
        }
        if let Some(s) = &self.space {
            if !s.outcome_names.is_empty() && s.outcome_names.len() != s.k {
                return validation("outcome_names must have k entries");
            }
            if !s.input_names.is_empty() && s.input_names.len() != bounds.dim() {
                return validation("input_names must have d entries");
            }
        }
        Ok(())
    }
}
