//! Simulated BOPE runs and replications.

use crate::acquisition::PeStrategy;
use crate::config::{LoopConfig, Schedule};
use crate::error::{validation, BopeError, Result};
use crate::pref::{Query, Response};
use crate::problems::{Benchmark, SimulatedDm};
use crate::qmc::derive_seed;
use crate::session::{metrics_to_csv, MetricRow, Session, StageEvent, SEED_DM};
use crate::stats::{mean, sem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Source of pairwise choices.
pub trait DecisionMaker {
    fn respond(&mut self, query: &Query) -> Result<Response>;
}

impl DecisionMaker for SimulatedDm {
    fn respond(&mut self, query: &Query) -> Result<Response> {
        SimulatedDm::respond(self, query)
    }
}

/// Source of outcome vectors for designs.
pub trait Evaluator {
    fn evaluate(&mut self, x: &[f64]) -> Result<Vec<f64>>;
    /// Number of evaluations made so far.
    fn count(&self) -> usize;
}

/// Evaluates the benchmark's outcome function and counts calls.
#[derive(Clone, Debug)]
pub struct BenchmarkEvaluator {
    benchmark: Benchmark,
    count: usize,
}

impl BenchmarkEvaluator {
    pub fn new(benchmark: Benchmark) -> Self {
        Self { benchmark, count: 0 }
    }
}

impl Evaluator for BenchmarkEvaluator {
    fn evaluate(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.count += 1;
        self.benchmark.problem.eval(x)
    }

    fn count(&self) -> usize {
        self.count
    }
}

/// Runs `n_comparisons` query/response rounds. With zero comparisons only a no-op event is recorded.
pub fn run_pe_stage(session: &mut Session, dm: &mut dyn DecisionMaker, n_comparisons: usize) -> Result<()> {
    if n_comparisons == 0 || session.config().pe_strategy == PeStrategy::None {
        return session.noop("empty preference-exploration stage");
    }
    for _ in 0..n_comparisons {
        let query = session.next_query()?.query.clone();
        let r = dm.respond(&query)?;
        session.submit_response(None, r)?;
    }
    Ok(())
}

/// Proposes a batch, evaluates it and records the outcomes.
pub fn run_experiment_batch(session: &mut Session, eval: &mut dyn Evaluator, batch_size: usize) -> Result<()> {
    let designs = session.propose_batch(Some(batch_size))?.designs.clone();
    let outcomes = designs.iter().map(|x| eval.evaluate(x)).collect::<Result<Vec<_>>>()?;
    session.complete_batch(outcomes)
}

fn run_init(session: &mut Session, eval: &mut dyn Evaluator) -> Result<()> {
    let designs = session.start(None)?.designs.clone();
    let outcomes = designs.iter().map(|x| eval.evaluate(x)).collect::<Result<Vec<_>>>()?;
    session.complete_batch(outcomes)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: Vec<MetricRow>,
    pub events: Vec<StageEvent>,
    /// Set when a stage failed; metrics and events then hold the partial run.
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Runs the configured schedule against the benchmark with a simulated DM.
pub fn run_bope(config: &LoopConfig, replication: usize) -> Result<RunOutcome> {
    let benchmark = config.benchmark()?.ok_or_else(|| BopeError::Validation("simulated runs need a benchmark".into()))?;
    let mut session = Session::new(config.clone(), replication)?;
    let mut dm = SimulatedDm::new(benchmark.utility.clone(), config.dm_noise, derive_seed(config.seed, SEED_DM))?;
    let mut eval = BenchmarkEvaluator::new(benchmark);
    let result = drive(&mut session, &mut dm, &mut eval);
    Ok(RunOutcome {
        metrics: session.metrics().to_vec(),
        events: session.events().to_vec(),
        error: result.err().map(|e| e.to_string()),
    })
}

/// Executes the schedule on an existing session.
pub fn drive(session: &mut Session, dm: &mut dyn DecisionMaker, eval: &mut dyn Evaluator) -> Result<()> {
    let c = session.config().clone();
    run_init(session, eval)?;
    let q = c.batch_size();
    match c.schedule {
        Schedule::Interleaved => {
            for _ in 0..c.n_batches {
                run_pe_stage(session, dm, c.comparisons_per_stage)?;
                run_experiment_batch(session, eval, q)?;
            }
        }
        Schedule::SingleStage => {
            run_pe_stage(session, dm, c.comparisons_per_stage * c.n_batches)?;
            for _ in 0..c.n_batches {
                run_experiment_batch(session, eval, q)?;
            }
        }
        Schedule::PeOnly => run_pe_stage(session, dm, c.comparisons_per_stage)?,
    }
    Ok(())
}

/// Seed of replication `rep`; shared by every strategy run from the same base seed.
pub fn replication_seed(base: u64, rep: usize) -> u64 {
    derive_seed(base, 1_000_000 + rep as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub problem: String,
    pub utility: String,
    pub strategy: String,
    pub schedule: String,
    pub checkpoint_type: String,
    pub checkpoint_index: usize,
    pub comparisons: usize,
    pub evaluations: usize,
    pub n_reps: usize,
    pub best_guess_mean: Option<f64>,
    pub best_guess_sem: Option<f64>,
    pub max_observed_mean: Option<f64>,
    pub max_observed_sem: Option<f64>,
    pub seconds_acq_mean: f64,
}

#[derive(Clone, Debug)]
pub struct Replications {
    /// Per-replication rows of successful runs, in replication order.
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    /// Failed replications and their errors.
    pub failures: Vec<(usize, String)>,
}

/// Runs `n_reps` independent replications with up to `jobs` in parallel.
pub fn run_replications(config: &LoopConfig, n_reps: usize, jobs: usize) -> Result<Replications> {
    if n_reps < 2 {
        return validation("at least 2 replications are needed");
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| BopeError::Validation(format!("thread pool: {e}")))?;
    let outcomes: Vec<(usize, Result<RunOutcome>)> = pool.install(|| {
        (0..n_reps)
            .into_par_iter()
            .map(|rep| {
                let cfg = LoopConfig { seed: replication_seed(config.seed, rep), ..config.clone() };
                (rep, run_bope(&cfg, rep))
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (rep, o) in outcomes {
        match o {
            Ok(o) if o.is_ok() => rows.extend(o.metrics),
            Ok(o) => failures.push((rep, o.error.unwrap_or_default())),
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    for (rep, e) in &failures {
        log::warn!("replication {rep} failed: {e}");
    }
    let summary = summarize(&rows);
    Ok(Replications { rows, summary, failures })
}

/// Mean and standard error per checkpoint and strategy.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    type Key = (String, String, String, String, String, usize);
    let mut groups: BTreeMap<Key, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.problem.clone(),
            r.utility.clone(),
            r.strategy.clone(),
            r.schedule.clone(),
            r.checkpoint_type.clone(),
            r.checkpoint_index,
        );
        groups.entry(key).or_default().push(r);
    }
    let stat = |v: Vec<f64>| -> (Option<f64>, Option<f64>) {
        if v.is_empty() {
            (None, None)
        } else {
            (Some(mean(&v)), Some(sem(&v)))
        }
    };
    groups
        .into_iter()
        .map(|((problem, utility, strategy, schedule, checkpoint_type, checkpoint_index), g)| {
            let (best_guess_mean, best_guess_sem) = stat(g.iter().filter_map(|r| r.util_best_guess).collect());
            let (max_observed_mean, max_observed_sem) = stat(g.iter().filter_map(|r| r.util_max_observed).collect());
            SummaryRow {
                problem,
                utility,
                strategy,
                schedule,
                checkpoint_type,
                checkpoint_index,
                comparisons: g[0].comparisons,
                evaluations: g[0].evaluations,
                n_reps: g.len(),
                best_guess_mean,
                best_guess_sem,
                max_observed_mean,
                max_observed_sem,
                seconds_acq_mean: mean(&g.iter().map(|r| r.seconds_acq).collect::<Vec<_>>()),
            }
        })
        .collect()
}

pub fn rows_to_csv(rows: &[MetricRow]) -> Result<String> {
    metrics_to_csv(rows)
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(SUMMARY_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| BopeError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub const SUMMARY_COLUMNS: [&str; 14] = [
    "problem",
    "utility",
    "strategy",
    "schedule",
    "checkpoint_type",
    "checkpoint_index",
    "comparisons",
    "evaluations",
    "n_reps",
    "best_guess_mean",
    "best_guess_sem",
    "max_observed_mean",
    "max_observed_sem",
    "seconds_acq_mean",
];

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| Ok(row?)).collect()
}
