//! Event-sourced BOPE session.
//!
//! Every state change is a [`StageEvent`] passed through [`Session::apply`].
//! Acquisition solves run outside `apply` and store their results in the
//! event; model refits and checkpoint metrics are recomputed inside it, so
//! replaying a log rebuilds datasets, models and metrics without repeating
//! any acquisition optimization.

use crate::acquisition::{
    pbo_eubo, pbo_thompson, posterior_mean_argmax, select_query, PeStrategy, QueryRule, SearchSpace, UtilityModel,
};
use crate::config::{ExperimentStrategy, LoopConfig};
use crate::error::{validation, BopeError, Result};
use crate::gp::{ExperimentDataset, OutcomeGp, OutcomeGpHyperparams};
use crate::optim::{maximize, Bounds, GradObjective};
use crate::paths::{OutcomeMap, RffPath, ZetaPath};
use crate::pref::{fit_pref_hyperparams, outcome_ranges, PrefGp, PrefGpHyperparams, PreferenceDataset, Query, Response};
use crate::problems::{estimate_y0, expand_range, Benchmark, BoxBounds, Y0_DEFAULT_EXPANSION};
use crate::qmc::{self, derive_seed};
use crate::qnei::{optimize_batch, OutcomeSource};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const SCHEMA_VERSION: u32 = 1;
/// Checkpoint cadence within PE stages, in comparisons.
pub const CHECKPOINT_EVERY: usize = 5;

// seed labels
const SEED_INIT: u64 = 1;
const SEED_QUERY: u64 = 2;
const SEED_BATCH: u64 = 3;
const SEED_FIT: u64 = 4;
const SEED_REPORT: u64 = 5;
const SEED_Y0: u64 = 6;
pub(crate) const SEED_DM: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointType {
    Comparison,
    Batch,
}

impl CheckpointType {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointType::Comparison => "comparison",
            CheckpointType::Batch => "batch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    /// Initial designs; outcomes arrive in a following `batch-completed`.
    InitBatch { designs: Vec<Vec<f64>> },
    PeQuery {
        y1: Vec<f64>,
        y2: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x1: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x2: Option<Vec<f64>>,
        /// Drawn at random rather than by the configured acquisition.
        random: bool,
        degraded: bool,
        seconds_acq: f64,
    },
    PeResponse { query_seq: u64, choice: Response },
    ExperimentBatch {
        designs: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
        degraded: bool,
        seconds_acq: f64,
    },
    BatchCompleted { batch_seq: u64, outcomes: Vec<Vec<f64>> },
    Report {
        checkpoint_type: CheckpointType,
        checkpoint_index: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        best_guess: Option<Vec<f64>>,
        degraded: bool,
    },
    Noop { reason: String },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::InitBatch { .. } => "init-batch",
            EventKind::PeQuery { .. } => "pe-query",
            EventKind::PeResponse { .. } => "pe-response",
            EventKind::ExperimentBatch { .. } => "experiment-batch",
            EventKind::BatchCompleted { .. } => "batch-completed",
            EventKind::Report { .. } => "report",
            EventKind::Noop { .. } => "noop",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub seq: u64,
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// One checkpoint of a run, in the summary CSV layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub problem: String,
    pub utility: String,
    pub strategy: String,
    pub schedule: String,
    pub replication: usize,
    pub checkpoint_type: String,
    pub checkpoint_index: usize,
    pub comparisons: usize,
    pub evaluations: usize,
    pub util_best_guess: Option<f64>,
    pub util_max_observed: Option<f64>,
    pub seconds_acq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub seq: u64,
    pub query: Query,
    pub x1: Option<Vec<f64>>,
    pub x2: Option<Vec<f64>>,
    pub random: bool,
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    pub seq: u64,
    pub designs: Vec<Vec<f64>>,
    pub initial: bool,
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDesign {
    pub index: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Posterior mean utility of the observed outcome.
    pub utility_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub comparisons: usize,
    pub evaluations: usize,
    pub batches_completed: usize,
    pub pref_hyperparams: Option<PrefGpHyperparams>,
    pub outcome_hyperparams: Option<OutcomeGpHyperparams>,
    pub ranking: Vec<RankedDesign>,
}

#[derive(Clone, Debug)]
pub struct Session {
    config: LoopConfig,
    replication: usize,
    benchmark: Option<Benchmark>,
    bounds: Bounds,
    k: usize,
    events: Vec<StageEvent>,
    experiments: ExperimentDataset,
    prefs: PreferenceDataset,
    /// PBO comparisons over designs.
    latent: PreferenceDataset,
    outcome_model: Option<OutcomeGp>,
    pref_model: Option<PrefGp>,
    pref_hyper: Option<PrefGpHyperparams>,
    latent_model: Option<PrefGp>,
    latent_hyper: Option<PrefGpHyperparams>,
    pending_query: Option<PendingQuery>,
    pending_batch: Option<PendingBatch>,
    n_init: usize,
    batches_completed: usize,
    max_observed: Option<f64>,
    acq_seconds: f64,
    metrics: Vec<MetricRow>,
    y0: Option<BoxBounds>,
}

impl Session {
    pub fn new(config: LoopConfig, replication: usize) -> Result<Self> {
        config.validate()?;
        let benchmark = config.benchmark()?;
        let (bounds, k) = config.bounds_and_k()?;
        Ok(Self {
            replication,
            benchmark,
            experiments: ExperimentDataset::new(bounds.clone(), k),
            prefs: PreferenceDataset::new(k),
            latent: PreferenceDataset::new(bounds.dim()),
            bounds,
            k,
            config,
            events: Vec::new(),
            outcome_model: None,
            pref_model: None,
            pref_hyper: None,
            latent_model: None,
            latent_hyper: None,
            pending_query: None,
            pending_batch: None,
            n_init: 0,
            batches_completed: 0,
            max_observed: None,
            acq_seconds: 0.0,
            metrics: Vec::new(),
            y0: None,
        })
    }

    /// Rebuilds a session by applying a recorded log.
    pub fn replay(config: LoopConfig, replication: usize, events: impl IntoIterator<Item = StageEvent>) -> Result<Self> {
        let mut s = Self::new(config, replication)?;
        for e in events {
            s.apply(e)?;
        }
        Ok(s)
    }

    pub fn config(&self) -> &LoopConfig {
        &self.config
    }

    pub fn replication(&self) -> usize {
        self.replication
    }

    pub fn benchmark(&self) -> Option<&Benchmark> {
        self.benchmark.as_ref()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn events(&self) -> &[StageEvent] {
        &self.events
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn experiments(&self) -> &ExperimentDataset {
        &self.experiments
    }

    pub fn preferences(&self) -> &PreferenceDataset {
        &self.prefs
    }

    pub fn outcome_model(&self) -> Option<&OutcomeGp> {
        self.outcome_model.as_ref()
    }

    pub fn pref_model(&self) -> Option<&PrefGp> {
        self.pref_model.as_ref()
    }

    pub fn latent_model(&self) -> Option<&PrefGp> {
        self.latent_model.as_ref()
    }

    pub fn pending_query(&self) -> Option<&PendingQuery> {
        self.pending_query.as_ref()
    }

    pub fn pending_batch(&self) -> Option<&PendingBatch> {
        self.pending_batch.as_ref()
    }

    pub fn comparisons(&self) -> usize {
        self.prefs.len()
    }

    pub fn evaluations(&self) -> usize {
        self.experiments.len()
    }

    pub fn batches_completed(&self) -> usize {
        self.batches_completed
    }

    pub fn is_initialized(&self) -> bool {
        self.n_init > 0
    }

    fn uses_pbo(&self) -> bool {
        self.config.pe_strategy.is_pbo()
    }

    fn seed(&self, label: u64) -> u64 {
        derive_seed(derive_seed(self.config.seed, label), self.events.len() as u64)
    }

    fn now_ms(&self) -> u64 {
        if !self.config.budgets.record_timing {
            return 0;
        }
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }

    fn elapsed(&self, t: Instant) -> f64 {
        if self.config.budgets.record_timing {
            t.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    /// Appends a new event at the end of the log.
    pub fn push(&mut self, kind: EventKind) -> Result<&StageEvent> {
        let e = StageEvent { seq: self.events.len() as u64, timestamp_ms: self.now_ms(), kind };
        self.apply(e)?;
        Ok(self.events.last().expect("just applied"))
    }

    /// Applies one event. The event is recorded only if it is valid in the
    /// current state and every refit it triggers succeeds.
    pub fn apply(&mut self, event: StageEvent) -> Result<()> {
        if event.seq != self.events.len() as u64 {
            return Err(BopeError::Conflict(format!("expected event seq {}, got {}", self.events.len(), event.seq)));
        }
        match &event.kind {
            EventKind::InitBatch { designs } => self.apply_init(designs)?,
            EventKind::PeQuery { y1, y2, x1, x2, random, degraded, seconds_acq } => {
                self.check_idle()?;
                if self.n_init == 0 {
                    return Err(BopeError::Conflict("no outcome data yet".into()));
                }
                let query = Query::new(y1.clone(), y2.clone())?;
                if y1.len() != self.k {
                    return validation(format!("query outcomes must have {} entries", self.k));
                }
                for x in [x1, x2].into_iter().flatten() {
                    if x.len() != self.bounds.dim() {
                        return validation("query designs have the wrong dimension");
                    }
                }
                if self.uses_pbo() && (x1.is_none() || x2.is_none()) {
                    return validation("PBO queries must carry their designs");
                }
                self.acq_seconds += seconds_acq;
                self.pending_query = Some(PendingQuery {
                    seq: event.seq,
                    query,
                    x1: x1.clone(),
                    x2: x2.clone(),
                    random: *random,
                    degraded: *degraded,
                });
            }
            EventKind::PeResponse { query_seq, choice } => self.apply_response(*query_seq, *choice, event.seq)?,
            EventKind::ExperimentBatch { designs, seconds_acq, degraded, .. } => {
                self.check_idle()?;
                if self.n_init == 0 {
                    return Err(BopeError::Conflict("the initial batch must be completed first".into()));
                }
                self.check_designs(designs)?;
                self.acq_seconds += seconds_acq;
                self.pending_batch =
                    Some(PendingBatch { seq: event.seq, designs: designs.clone(), initial: false, degraded: *degraded });
            }
            EventKind::BatchCompleted { batch_seq, outcomes } => self.apply_completion(*batch_seq, outcomes, event.seq)?,
            EventKind::Report { checkpoint_type, checkpoint_index, best_guess, .. } => {
                if let Some(x) = best_guess {
                    if x.len() != self.bounds.dim() || !self.bounds.contains(x) {
                        return validation("best guess must lie in the design box");
                    }
                }
                let util_best_guess = match (&self.benchmark, best_guess) {
                    (Some(b), Some(x)) => Some(b.true_value(x)?),
                    _ => None,
                };
                self.metrics.push(MetricRow {
                    problem: self.benchmark.as_ref().map_or("custom".into(), |b| b.problem.name().to_string()),
                    utility: self.benchmark.as_ref().map_or("dm".into(), |b| b.utility.family().to_string()),
                    strategy: self.config.label(),
                    schedule: self.config.schedule.as_str().to_string(),
                    replication: self.replication,
                    checkpoint_type: checkpoint_type.as_str().to_string(),
                    checkpoint_index: *checkpoint_index,
                    comparisons: self.prefs.len(),
                    evaluations: self.experiments.len(),
                    util_best_guess,
                    util_max_observed: self.max_observed,
                    seconds_acq: self.acq_seconds,
                });
                self.acq_seconds = 0.0;
            }
            EventKind::Noop { .. } => {}
        }
        self.events.push(event);
        Ok(())
    }

    fn check_idle(&self) -> Result<()> {
        if let Some(q) = &self.pending_query {
            return Err(BopeError::Conflict(format!("query {} is awaiting a response", q.seq)));
        }
        if let Some(b) = &self.pending_batch {
            return Err(BopeError::Conflict(format!("batch {} is awaiting outcomes", b.seq)));
        }
        Ok(())
    }

    fn check_designs(&self, designs: &[Vec<f64>]) -> Result<()> {
        if designs.is_empty() {
            return validation("a batch needs at least one design");
        }
        let b = &self.bounds;
        for x in designs {
            if x.len() != b.dim() || x.iter().any(|v| !v.is_finite()) {
                return validation(format!("designs must be finite vectors of length {}", b.dim()));
            }
            let tol = |j: usize| 1e-9 * (b.upper[j] - b.lower[j]);
            if x.iter().enumerate().any(|(j, v)| *v < b.lower[j] - tol(j) || *v > b.upper[j] + tol(j)) {
                return validation("design outside the design box");
            }
        }
        Ok(())
    }

    fn apply_init(&mut self, designs: &[Vec<f64>]) -> Result<()> {
        self.check_idle()?;
        if self.n_init > 0 {
            return Err(BopeError::Conflict("the session already has an initial batch".into()));
        }
        self.check_designs(designs)?;
        if designs.len() < 2 {
            return validation("the initial batch needs at least 2 designs");
        }
        self.pending_batch = Some(PendingBatch {
            seq: self.events.len() as u64,
            designs: designs.to_vec(),
            initial: true,
            degraded: false,
        });
        Ok(())
    }

    fn apply_completion(&mut self, batch_seq: u64, outcomes: &[Vec<f64>], seq: u64) -> Result<()> {
        let batch = match &self.pending_batch {
            Some(b) if b.seq == batch_seq => b.clone(),
            Some(b) => return Err(BopeError::Conflict(format!("pending batch is {}, not {batch_seq}", b.seq))),
            None => return Err(BopeError::Conflict("no batch is awaiting outcomes".into())),
        };
        if outcomes.len() != batch.designs.len() {
            return validation(format!("expected {} outcome rows, got {}", batch.designs.len(), outcomes.len()));
        }
        let mut data = self.experiments.clone();
        for (x, y) in batch.designs.iter().zip(outcomes) {
            data.push(x.clone(), y.clone())?;
        }
        let fit_cfg = crate::gp::FitConfig {
            seed: derive_seed(derive_seed(self.config.seed, SEED_FIT), seq),
            ..self.config.budgets.outcome_fit.clone()
        };
        let warm = self.outcome_model.as_ref().map(|m| m.hyperparams());
        let model = OutcomeGp::fit_warm(&data, &fit_cfg, warm.as_ref())?;
        let mut max_observed = self.max_observed;
        if let Some(b) = &self.benchmark {
            for y in outcomes {
                let u = b.utility.eval(y)?;
                max_observed = Some(max_observed.map_or(u, |m: f64| m.max(u)));
            }
        }
        self.experiments = data;
        self.outcome_model = Some(model);
        self.max_observed = max_observed;
        if batch.initial {
            self.n_init = batch.designs.len();
        }
        self.batches_completed += usize::from(!batch.initial);
        self.pending_batch = None;
        Ok(())
    }

    fn apply_response(&mut self, query_seq: u64, choice: Response, seq: u64) -> Result<()> {
        let pending = match &self.pending_query {
            Some(p) if p.seq == query_seq => p.clone(),
            Some(p) => return Err(BopeError::Conflict(format!("pending query is {}, not {query_seq}", p.seq))),
            None => return Err(BopeError::Conflict("no query is awaiting a response".into())),
        };
        if query_seq + 1 != seq {
            return Err(BopeError::Conflict("a response must immediately follow its query".into()));
        }
        let fit_seed = derive_seed(derive_seed(self.config.seed, SEED_FIT), seq);
        if self.uses_pbo() {
            let mut latent = self.latent.clone();
            let q = Query::new(pending.x1.clone().expect("checked"), pending.x2.clone().expect("checked"))?;
            latent.push(&q, choice)?;
            let (model, hyper) = self.refit_pref(&latent, self.latent_model.as_ref(), self.latent_hyper.as_ref(), fit_seed)?;
            self.latent = latent;
            self.latent_model = Some(model);
            self.latent_hyper = hyper;
            self.prefs.push(&pending.query, choice)?;
        } else {
            let mut prefs = self.prefs.clone();
            prefs.push(&pending.query, choice)?;
            let (model, hyper) = self.refit_pref(&prefs, self.pref_model.as_ref(), self.pref_hyper.as_ref(), fit_seed)?;
            self.prefs = prefs;
            self.pref_model = Some(model);
            self.pref_hyper = hyper;
        }
        self.pending_query = None;
        Ok(())
    }

    /// Laplace refresh after every response; hyperparameters refit every
    /// `CHECKPOINT_EVERY` comparisons once at least `2·dim` exist.
    fn refit_pref(
        &self,
        data: &PreferenceDataset,
        previous: Option<&PrefGp>,
        fitted: Option<&PrefGpHyperparams>,
        seed: u64,
    ) -> Result<(PrefGp, Option<PrefGpHyperparams>)> {
        let n = data.len();
        let mut hyper = fitted.cloned();
        if n >= 2 * data.k && n % CHECKPOINT_EVERY == 0 {
            let cfg = crate::pref::PrefFitConfig { seed, ..self.config.budgets.pref_fit.clone() };
            let fit = fit_pref_hyperparams(data, &cfg, fitted)?;
            if !fit.fallback {
                hyper = Some(fit.hyper);
            }
        }
        let defaults = PrefGpHyperparams::default_for(&outcome_ranges(data));
        let active = hyper.clone().unwrap_or_else(|| defaults.clone());
        let model = match PrefGp::fit_warm(data, &active, previous) {
            Ok(m) => m,
            Err(e) if hyper.is_some() => {
                log::warn!("preference refit failed with fitted hyperparameters ({e}); using defaults");
                hyper = None;
                PrefGp::fit_warm(data, &defaults, None)?
            }
            Err(e) => return Err(e),
        };
        Ok((model, hyper))
    }

    /// Designs of the initial batch: the first points of the scrambled Sobol sequence.
    pub fn initial_designs(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.config.initial_batch_size()?;
        Ok(qmc::box_points_from(0, n, &self.bounds.lower, &self.bounds.upper, self.sobol_seed()))
    }

    fn sobol_seed(&self) -> u64 {
        derive_seed(self.config.seed, SEED_INIT)
    }

    /// Proposes the initial batch (Sobol designs unless `designs` is given).
    pub fn start(&mut self, designs: Option<Vec<Vec<f64>>>) -> Result<&PendingBatch> {
        let designs = match designs {
            Some(d) => d,
            None => self.initial_designs()?,
        };
        self.push(EventKind::InitBatch { designs })?;
        Ok(self.pending_batch.as_ref().expect("init batch pending"))
    }

    /// Selects and records the next query.
    pub fn next_query(&mut self) -> Result<&PendingQuery> {
        self.check_idle()?;
        if self.n_init == 0 {
            return Err(BopeError::Conflict("the initial batch must be completed first".into()));
        }
        if self.config.pe_strategy == PeStrategy::None {
            return validation("this session has no preference-exploration strategy");
        }
        let t = Instant::now();
        let kind = self.compute_query()?;
        let kind = match kind {
            EventKind::PeQuery { y1, y2, x1, x2, random, degraded, .. } => {
                EventKind::PeQuery { y1, y2, x1, x2, random, degraded, seconds_acq: self.elapsed(t) }
            }
            other => other,
        };
        self.push(kind)?;
        Ok(self.pending_query.as_ref().expect("query pending"))
    }

    fn compute_query(&mut self) -> Result<EventKind> {
        let seed = self.seed(SEED_QUERY);
        let records = &self.experiments.records;
        let pair_event = |i: usize, j: usize, random: bool| EventKind::PeQuery {
            y1: records[i].y.clone(),
            y2: records[j].y.clone(),
            x1: Some(records[i].x.clone()),
            x2: Some(records[j].x.clone()),
            random,
            degraded: false,
            seconds_acq: 0.0,
        };
        let warmup = 2 * self.k;
        if self.prefs.len() < warmup {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = sample(&mut rng, self.n_init, 2);
            return Ok(pair_event(idx.index(0), idx.index(1), true));
        }
        let strategy = self.config.pe_strategy;
        if strategy.is_pbo() {
            let latent = self.latent_model.as_ref().expect("fitted after warm-up");
            let designs = self.experiments.designs();
            let (i, j) = match strategy {
                PeStrategy::PboTs => pbo_thompson(latent, &designs, seed)?,
                _ => pbo_eubo(latent, &designs)?,
            };
            return Ok(pair_event(i, j, false));
        }
        let rule = strategy.rule().expect("non-PBO strategies have a rule");
        let y0 = match strategy {
            PeStrategy::EuboY0 | PeStrategy::BaldY0 | PeStrategy::RandomY0 => Some(self.y0_box()?.to_bounds()),
            _ => None,
        };
        let pref = self.pref_model.as_ref().expect("fitted after warm-up");
        let outcome = self.outcome_model.as_ref().expect("fitted after init");
        let optimizer = self.config.budgets.query_optimizer.with_seed(seed);
        let rff;
        let zeta;
        let search = match strategy {
            PeStrategy::EuboZeta => {
                zeta = ZetaPath::draw(outcome, seed);
                SearchSpace::Path(&zeta as &dyn OutcomeMap)
            }
            PeStrategy::EuboFtilde | PeStrategy::BaldFtilde | PeStrategy::RandomFtilde => {
                rff = RffPath::draw(outcome, self.config.budgets.n_basis, seed)?;
                SearchSpace::Path(&rff as &dyn OutcomeMap)
            }
            _ => SearchSpace::Box(y0.expect("prior-region strategy")),
        };
        let c = match select_query(rule, pref, &search, &optimizer, seed) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("query acquisition failed ({e}); falling back to a random query");
                let mut c = select_query(QueryRule::Random, pref, &search, &optimizer, seed)?;
                c.degraded = true;
                c
            }
        };
        Ok(EventKind::PeQuery {
            y1: c.y1,
            y2: c.y2,
            x1: c.x1,
            x2: c.x2,
            random: rule == QueryRule::Random,
            degraded: c.degraded,
            seconds_acq: 0.0,
        })
    }

    /// Prior outcome region: estimated from the benchmark problem, or from
    /// the observed outcomes of a custom space.
    pub fn y0_box(&mut self) -> Result<BoxBounds> {
        if let Some(b) = &self.y0 {
            return Ok(b.clone());
        }
        let b = match &self.benchmark {
            Some(bm) => estimate_y0(
                &bm.problem,
                self.config.budgets.y0_samples,
                Y0_DEFAULT_EXPANSION,
                derive_seed(self.config.seed, SEED_Y0),
            ),
            None => {
                if self.experiments.is_empty() {
                    return Err(BopeError::Conflict("no outcome data yet".into()));
                }
                let mut lo = vec![f64::INFINITY; self.k];
                let mut hi = vec![f64::NEG_INFINITY; self.k];
                for r in &self.experiments.records {
                    for o in 0..self.k {
                        lo[o] = lo[o].min(r.y[o]);
                        hi[o] = hi[o].max(r.y[o]);
                    }
                }
                expand_range(&lo, &hi, Y0_DEFAULT_EXPANSION)
            }
        };
        self.y0 = Some(b.clone());
        Ok(b)
    }

    /// Records the DM's choice for the pending query, and a checkpoint
    /// whenever the comparison count reaches a multiple of `CHECKPOINT_EVERY`.
    pub fn submit_response(&mut self, query_seq: Option<u64>, choice: Response) -> Result<()> {
        let pending = self
            .pending_query
            .as_ref()
            .ok_or_else(|| BopeError::Conflict("no query is awaiting a response".into()))?;
        let query_seq = query_seq.unwrap_or(pending.seq);
        self.push(EventKind::PeResponse { query_seq, choice })?;
        if self.prefs.len() % CHECKPOINT_EVERY == 0 {
            self.checkpoint(CheckpointType::Comparison, self.prefs.len() / CHECKPOINT_EVERY)?;
        }
        Ok(())
    }

    /// Selects and records an experiment batch of `q` designs (configured size if `None`).
    pub fn propose_batch(&mut self, q: Option<usize>) -> Result<&PendingBatch> {
        self.check_idle()?;
        if self.n_init == 0 {
            return Err(BopeError::Conflict("the initial batch must be completed first".into()));
        }
        let q = q.unwrap_or_else(|| self.config.batch_size());
        if q == 0 {
            return validation("batch size must be at least 1");
        }
        let t = Instant::now();
        let (designs, value, degraded) = self.compute_batch(q)?;
        let seconds_acq = self.elapsed(t);
        self.push(EventKind::ExperimentBatch { designs, value, degraded, seconds_acq })?;
        Ok(self.pending_batch.as_ref().expect("batch pending"))
    }

    fn sobol_stride(&self, q: usize) -> Vec<Vec<f64>> {
        qmc::box_points_from(self.experiments.len(), q, &self.bounds.lower, &self.bounds.upper, self.sobol_seed())
    }

    fn compute_batch(&self, q: usize) -> Result<(Vec<Vec<f64>>, Option<f64>, bool)> {
        let strategy = self.config.experiment_strategy;
        if strategy == ExperimentStrategy::SobolOnly {
            return Ok((self.sobol_stride(q), None, false));
        }
        let seed = self.seed(SEED_BATCH);
        let budgets = &self.config.budgets;
        let qcfg = crate::qnei::QneiConfig { seed, ..budgets.qnei.clone() };
        let optimizer = budgets.batch_optimizer.with_seed(seed);
        let baseline = self.experiments.designs();
        let outcome = self.outcome_model.as_ref().expect("fitted after init");
        let prior_pref;
        let truth;
        let (source, utility) = match strategy {
            ExperimentStrategy::Qneiuu => {
                let pref = match &self.pref_model {
                    Some(m) => m,
                    None => {
                        prior_pref = PrefGp::prior(self.k, PrefGpHyperparams::default_for(&vec![1.0; self.k]))?;
                        &prior_pref
                    }
                };
                (OutcomeSource::Gp(outcome), UtilityModel::Pref(pref))
            }
            ExperimentStrategy::QneiTrueUtility => {
                let b = self.benchmark.as_ref().expect("validated");
                truth = move |y: &[f64]| b.utility.eval_unchecked(y);
                (OutcomeSource::Gp(outcome), UtilityModel::Known(&truth))
            }
            ExperimentStrategy::PboQnei => {
                let latent = match &self.latent_model {
                    Some(m) => m,
                    None => {
                        let ranges: Vec<f64> = self.bounds.lower.iter().zip(&self.bounds.upper).map(|(l, u)| u - l).collect();
                        prior_pref = PrefGp::prior(self.bounds.dim(), PrefGpHyperparams::default_for(&ranges))?;
                        &prior_pref
                    }
                };
                (OutcomeSource::Identity(&self.bounds), UtilityModel::Pref(latent))
            }
            ExperimentStrategy::SobolOnly => unreachable!(),
        };
        match optimize_batch(source, utility, &baseline, q, budgets.batch_mode, &qcfg, &optimizer) {
            Ok(r) => Ok((r.designs, Some(r.value), r.degraded)),
            Err(e) => {
                log::warn!("batch acquisition failed ({e}); using the next Sobol stride");
                Ok((self.sobol_stride(q), None, true))
            }
        }
    }

    /// Records outcomes for the pending batch, refits the outcome model and
    /// records a batch checkpoint.
    pub fn complete_batch(&mut self, outcomes: Vec<Vec<f64>>) -> Result<()> {
        let seq = self
            .pending_batch
            .as_ref()
            .ok_or_else(|| BopeError::Conflict("no batch is awaiting outcomes".into()))?
            .seq;
        self.push(EventKind::BatchCompleted { batch_seq: seq, outcomes })?;
        self.checkpoint(CheckpointType::Batch, self.batches_completed)
    }

    /// Records a checkpoint, with a best-guess design when reporting is enabled.
    pub fn checkpoint(&mut self, checkpoint_type: CheckpointType, checkpoint_index: usize) -> Result<()> {
        let (best_guess, degraded) = match self.best_guess()? {
            Some((x, d)) => (Some(x), d),
            None => (None, false),
        };
        self.push(EventKind::Report { checkpoint_type, checkpoint_index, best_guess, degraded })?;
        Ok(())
    }

    pub fn noop(&mut self, reason: impl Into<String>) -> Result<()> {
        self.push(EventKind::Noop { reason: reason.into() })?;
        Ok(())
    }

    /// Design maximizing the posterior mean utility.
    pub fn best_guess(&self) -> Result<Option<(Vec<f64>, bool)>> {
        let budgets = &self.config.budgets;
        if !budgets.report_best_guess {
            return Ok(None);
        }
        let Some(outcome) = &self.outcome_model else { return Ok(None) };
        let optimizer = budgets.best_guess_optimizer.with_seed(self.seed(SEED_REPORT));
        let extra = self.experiments.designs();
        let r = match self.config.experiment_strategy {
            ExperimentStrategy::QneiTrueUtility => {
                let b = self.benchmark.as_ref().expect("validated");
                let u = |y: &[f64]| b.utility.eval_unchecked(y);
                posterior_mean_argmax(outcome, UtilityModel::Known(&u), &optimizer, budgets.best_guess_samples, &extra)?
            }
            ExperimentStrategy::PboQnei => {
                let Some(latent) = &self.latent_model else { return Ok(None) };
                let obj = GradObjective(|x: &[f64], g: Option<&mut [f64]>| {
                    let (v, grad) = latent.mean_grad(x);
                    if let Some(g) = g {
                        g.copy_from_slice(&grad);
                    }
                    v
                });
                maximize(&obj, &self.bounds, &optimizer, &extra)?
            }
            _ => {
                let Some(pref) = &self.pref_model else { return Ok(None) };
                posterior_mean_argmax(outcome, UtilityModel::Pref(pref), &optimizer, budgets.best_guess_samples, &extra)?
            }
        };
        let mut x = r.x;
        self.bounds.project(&mut x);
        Ok(Some((x, r.degraded)))
    }

    /// Evaluated designs ranked by posterior mean utility of their observed outcomes.
    pub fn ranking(&self) -> Vec<RankedDesign> {
        let score = |r: &crate::gp::Record| -> f64 {
            if self.uses_pbo() {
                self.latent_model.as_ref().map_or(0.0, |m| m.mean(&r.x))
            } else {
                self.pref_model.as_ref().map_or(0.0, |m| m.mean(&r.y))
            }
        };
        let mut out: Vec<RankedDesign> = self
            .experiments
            .records
            .iter()
            .enumerate()
            .map(|(index, r)| RankedDesign { index, x: r.x.clone(), y: r.y.clone(), utility_mean: score(r) })
            .collect();
        out.sort_by(|a, b| b.utility_mean.total_cmp(&a.utility_mean).then(a.index.cmp(&b.index)));
        out
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            comparisons: self.prefs.len(),
            evaluations: self.experiments.len(),
            batches_completed: self.batches_completed,
            pref_hyperparams: if self.uses_pbo() {
                self.latent_model.as_ref().map(|m| m.hyperparams().clone())
            } else {
                self.pref_model.as_ref().map(|m| m.hyperparams().clone())
            },
            outcome_hyperparams: self.outcome_model.as_ref().map(|m| m.hyperparams()),
            ranking: self.ranking(),
        }
    }
}

/// Writes events as JSON lines.
pub fn events_to_jsonl(events: &[StageEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn events_from_jsonl(text: &str) -> Result<Vec<StageEvent>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Writes metric rows as CSV with a header, even when there are no rows.
pub fn metrics_to_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| BopeError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub const METRIC_COLUMNS: [&str; 12] = [
    "problem",
    "utility",
    "strategy",
    "schedule",
    "replication",
    "checkpoint_type",
    "checkpoint_index",
    "comparisons",
    "evaluations",
    "util_best_guess",
    "util_max_observed",
    "seconds_acq",
];
