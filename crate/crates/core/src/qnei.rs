//! Batch noisy expected improvement under utility uncertainty.
//!
//! Outcome samples over `observed ∪ batch` are drawn with a block Cholesky
//! factor whose observed block comes first, so the observed-point samples (and
//! the utility samples there) are computed once per estimator and reused for
//! every candidate batch. Base normals are indexed by sample and position, which
//! keeps the surface deterministic for the optimizer.

use crate::acquisition::UtilityModel;
use crate::error::{validation, Result};
use crate::gp::OutcomeGp;
use crate::linalg::{cholesky_jittered_floor, psd_factor};
use crate::optim::{maximize, Bounds, FnObjective, OptimizerConfig};
use crate::pref::PrefGp;
use crate::qmc;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QneiConfig {
    pub n_f: usize,
    pub n_g: usize,
    pub seed: u64,
}

impl Default for QneiConfig {
    fn default() -> Self {
        Self { n_f: 32, n_g: 8, seed: 0 }
    }
}

/// How designs map to the inputs of the utility model.
#[derive(Clone, Copy)]
pub enum OutcomeSource<'a> {
    /// Outcomes are uncertain and modeled by a GP.
    Gp(&'a OutcomeGp),
    /// The utility model takes designs directly (latent-objective baselines).
    Identity(&'a Bounds),
}

impl OutcomeSource<'_> {
    fn bounds(&self) -> &Bounds {
        match self {
            OutcomeSource::Gp(m) => m.bounds(),
            OutcomeSource::Identity(b) => b,
        }
    }
}

/// Lower factor of a posterior covariance; `prior_var` scales the jitter.
fn lower_factor(m: &DMatrix<f64>, prior_var: f64) -> DMatrix<f64> {
    match cholesky_jittered_floor(m, prior_var.abs().max(1e-300)) {
        Some((c, _)) => c.l(),
        None => psd_factor(m),
    }
}

fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if l.nrows() == 0 {
        return DMatrix::zeros(0, b.ncols());
    }
    l.solve_lower_triangular(b).unwrap_or_else(|| {
        // singular factor from the eigen fallback: least-squares solve
        l.clone().pseudo_inverse(1e-12).expect("pseudo-inverse") * b
    })
}

/// Prefix state of the outcome model for one output.
struct FPrefix {
    mean: DVector<f64>,
    l: DMatrix<f64>,
    whitened: DMatrix<f64>,
}

/// Prefix state of the utility model for one outcome sample.
struct GPrefix {
    outcomes: Vec<Vec<f64>>,
    /// Q times the m × P prior cross-covariances.
    qk: DMatrix<f64>,
    l: DMatrix<f64>,
    /// P × n_g prefix normals.
    eps: DMatrix<f64>,
    obs_max: Vec<f64>,
    pend_max: Vec<f64>,
}

/// Frozen SAA estimator of qNEIUU given observed designs and already
/// selected (pending) batch members.
pub struct QneiEstimator<'a> {
    source: OutcomeSource<'a>,
    utility: UtilityModel<'a>,
    config: QneiConfig,
    n_prefix: usize,
    prefix_n: Vec<Vec<f64>>,
    f_prefix: Vec<FPrefix>,
    /// Per f-sample, per output prefix normals (P × k).
    z_prefix: Vec<DMatrix<f64>>,
    g_prefix: Vec<GPrefix>,
    seed_f: u64,
    seed_g: u64,
}

impl<'a> QneiEstimator<'a> {
    pub fn new(
        source: OutcomeSource<'a>,
        utility: UtilityModel<'a>,
        baseline: &[Vec<f64>],
        pending: &[Vec<f64>],
        config: &QneiConfig,
    ) -> Result<Self> {
        if baseline.is_empty() {
            return validation("qNEI needs at least one observed design");
        }
        if config.n_f == 0 || config.n_g == 0 {
            return validation("sample counts must be positive");
        }
        let d = source.bounds().dim();
        if baseline.iter().chain(pending).any(|x| x.len() != d) {
            return validation(format!("designs must have dimension {d}"));
        }
        let mut config = config.clone();
        if matches!(source, OutcomeSource::Identity(_)) {
            config.n_f = 1;
        }
        if matches!(utility, UtilityModel::Known(_)) {
            config.n_g = 1;
        }
        let seed_f = qmc::derive_seed(config.seed, 1);
        let seed_g = qmc::derive_seed(config.seed, 2);
        let prefix: Vec<Vec<f64>> = baseline.iter().chain(pending).cloned().collect();
        let n_obs = baseline.len();
        let p = prefix.len();

        let (prefix_n, f_prefix, z_prefix, outcome_samples) = match source {
            OutcomeSource::Gp(model) => {
                let k = model.k();
                let pts_n: Vec<Vec<f64>> = prefix.iter().map(|x| model.normalize(x)).collect();
                let f_prefix: Vec<FPrefix> = (0..k)
                    .map(|o| {
                        let w = model.whitened_cross(o, &pts_n);
                        let cov = model.cov_from_cross(o, &pts_n, &w, &pts_n, &w);
                        FPrefix { mean: model.mean_from_cross(o, &pts_n), l: lower_factor(&cov, model.prior_variance(o)), whitened: w }
                    })
                    .collect();
                let mut zs = Vec::with_capacity(config.n_f);
                let mut samples = Vec::with_capacity(config.n_f);
                for j in 0..config.n_f {
                    let z = DMatrix::from_fn(p, k, |pos, o| qmc::normal(j as u64, (pos * k + o) as u64, seed_f));
                    let mut ys = vec![vec![0.0; k]; p];
                    for (o, fp) in f_prefix.iter().enumerate() {
                        let y = &fp.mean + &fp.l * z.column(o);
                        for pos in 0..p {
                            ys[pos][o] = y[pos];
                        }
                    }
                    zs.push(z);
                    samples.push(ys);
                }
                (pts_n, f_prefix, zs, samples)
            }
            OutcomeSource::Identity(_) => (prefix.clone(), vec![], vec![], vec![prefix.clone()]),
        };

        let g_prefix = outcome_samples
            .into_iter()
            .enumerate()
            .map(|(j, ys)| g_prefix_for(utility, ys, n_obs, config.n_g, qmc::derive_seed(seed_g, j as u64)))
            .collect::<Result<Vec<_>>>()?;

        Ok(Self { source, utility, config, n_prefix: p, prefix_n, f_prefix, z_prefix, g_prefix, seed_f, seed_g })
    }

    /// SAA estimate for the candidate batch (pending points are included implicitly).
    pub fn value(&self, batch: &[Vec<f64>]) -> f64 {
        let q = batch.len();
        if q == 0 {
            return self.empty_value();
        }
        let p = self.n_prefix;
        // outcome samples for the batch, one q-vector list per f-sample
        let batch_outcomes: Vec<Vec<Vec<f64>>> = match self.source {
            OutcomeSource::Identity(_) => vec![batch.to_vec()],
            OutcomeSource::Gp(model) => {
                let k = model.k();
                let b_n: Vec<Vec<f64>> = batch.iter().map(|x| model.normalize(x)).collect();
                let mut parts = Vec::with_capacity(k);
                for (o, fp) in self.f_prefix.iter().enumerate() {
                    let wb = model.whitened_cross(o, &b_n);
                    let mean = model.mean_from_cross(o, &b_n);
                    let cov_pb = model.cov_from_cross(o, &self.prefix_n, &fp.whitened, &b_n, &wb);
                    let cov_bb = model.cov_from_cross(o, &b_n, &wb, &b_n, &wb);
                    let a = solve_lower(&fp.l, &cov_pb);
                    let s = crate::linalg::symmetrize(&(cov_bb - a.tr_mul(&a)));
                    parts.push((mean, a, lower_factor(&s, model.prior_variance(o))));
                }
                (0..self.config.n_f)
                    .map(|j| {
                        let mut ys = vec![vec![0.0; k]; q];
                        for (o, (mean, a, ls)) in parts.iter().enumerate() {
                            let zb = DVector::from_fn(q, |b, _| qmc::normal(j as u64, ((p + b) * k + o) as u64, self.seed_f));
                            let y = mean + a.tr_mul(&self.z_prefix[j].column(o)) + ls * zb;
                            for b in 0..q {
                                ys[b][o] = y[b];
                            }
                        }
                        ys
                    })
                    .collect()
            }
        };
        let mut total = 0.0;
        for (j, yb) in batch_outcomes.iter().enumerate() {
            let gp = &self.g_prefix[j];
            match self.utility {
                UtilityModel::Known(u) => {
                    let best = yb.iter().map(|y| u(y)).fold(gp.pend_max[0], f64::max);
                    total += (best - gp.obs_max[0]).max(0.0);
                }
                UtilityModel::Pref(m) => {
                    total += self.pref_improvement(m, gp, yb, j);
                }
            }
        }
        total / (batch_outcomes.len() * self.config.n_g) as f64
    }

    fn empty_value(&self) -> f64 {
        let mut total = 0.0;
        for gp in &self.g_prefix {
            for i in 0..gp.obs_max.len() {
                total += (gp.pend_max[i] - gp.obs_max[i]).max(0.0);
            }
        }
        total / (self.g_prefix.len() * self.config.n_g) as f64
    }

    fn pref_improvement(&self, m: &PrefGp, gp: &GPrefix, yb: &[Vec<f64>], j: usize) -> f64 {
        let q = yb.len();
        let p = self.n_prefix;
        let (mean_b, cov_pb, cov_bb) = if m.points().is_empty() {
            (
                DVector::zeros(q),
                DMatrix::from_fn(p, q, |a, b| m.kfun(&gp.outcomes[a], &yb[b])),
                DMatrix::from_fn(q, q, |a, b| m.kfun(&yb[a], &yb[b])),
            )
        } else {
            let kb = DMatrix::from_fn(m.points().len(), q, |i, b| m.kfun(&m.points()[i], &yb[b]));
            let mean_b = kb.tr_mul(m.alpha());
            let cov_pb = DMatrix::from_fn(p, q, |a, b| m.kfun(&gp.outcomes[a], &yb[b])) - gp.qk.tr_mul(&kb);
            let cov_bb = DMatrix::from_fn(q, q, |a, b| m.kfun(&yb[a], &yb[b])) - kb.tr_mul(&(m.q() * &kb));
            (mean_b, cov_pb, cov_bb)
        };
        let a = solve_lower(&gp.l, &cov_pb);
        let s = crate::linalg::symmetrize(&(cov_bb - a.tr_mul(&a)));
        let ls = lower_factor(&s, m.kfun(&yb[0], &yb[0]));
        let seed = qmc::derive_seed(self.seed_g, j as u64);
        let mut total = 0.0;
        for i in 0..self.config.n_g {
            let eb = DVector::from_fn(q, |b, _| qmc::normal(i as u64, (p + b) as u64, seed));
            let g = &mean_b + a.tr_mul(&gp.eps.column(i)) + &ls * eb;
            let best = g.iter().copied().fold(gp.pend_max[i], f64::max);
            total += (best - gp.obs_max[i]).max(0.0);
        }
        total
    }
}

fn g_prefix_for(utility: UtilityModel<'_>, outcomes: Vec<Vec<f64>>, n_obs: usize, n_g: usize, seed: u64) -> Result<GPrefix> {
    let p = outcomes.len();
    match utility {
        UtilityModel::Known(u) => {
            let vals: Vec<f64> = outcomes.iter().map(|y| u(y)).collect();
            Ok(GPrefix {
                outcomes,
                qk: DMatrix::zeros(0, 0),
                l: DMatrix::zeros(0, 0),
                eps: DMatrix::zeros(0, 0),
                obs_max: vec![vals[..n_obs].iter().copied().fold(f64::NEG_INFINITY, f64::max)],
                pend_max: vec![vals[n_obs..].iter().copied().fold(f64::NEG_INFINITY, f64::max)],
            })
        }
        UtilityModel::Pref(m) => {
            if outcomes.iter().any(|y| y.len() != m.dim()) {
                return validation("utility model dimension does not match outcomes");
            }
            let post = m.posterior(&outcomes)?;
            let mpts = m.points().len();
            let kstar = DMatrix::from_fn(mpts, p, |i, a| m.kfun(&m.points()[i], &outcomes[a]));
            let qk = if mpts > 0 { m.q() * &kstar } else { DMatrix::zeros(0, p) };
            let l = lower_factor(&post.cov, m.kfun(&outcomes[0], &outcomes[0]));
            let eps = DMatrix::from_fn(p, n_g, |pos, i| qmc::normal(i as u64, pos as u64, seed));
            let g = &l * &eps;
            let mut obs_max = vec![f64::NEG_INFINITY; n_g];
            let mut pend_max = vec![f64::NEG_INFINITY; n_g];
            for i in 0..n_g {
                for pos in 0..p {
                    let v = post.mean[pos] + g[(pos, i)];
                    if pos < n_obs {
                        obs_max[i] = obs_max[i].max(v);
                    } else {
                        pend_max[i] = pend_max[i].max(v);
                    }
                }
            }
            Ok(GPrefix { outcomes, qk, l, eps, obs_max, pend_max })
        }
    }
}

/// qNEIUU of `batch` against the observed designs `baseline`.
pub fn qneiuu(outcome: &OutcomeGp, pref: &PrefGp, batch: &[Vec<f64>], baseline: &[Vec<f64>], config: &QneiConfig) -> Result<f64> {
    Ok(QneiEstimator::new(OutcomeSource::Gp(outcome), UtilityModel::Pref(pref), baseline, &[], config)?.value(batch))
}

/// qNEI with the ground-truth utility in place of the preference model.
pub fn true_utility_qnei(
    outcome: &OutcomeGp,
    utility: &(dyn Fn(&[f64]) -> f64 + Sync),
    batch: &[Vec<f64>],
    baseline: &[Vec<f64>],
    config: &QneiConfig,
) -> Result<f64> {
    Ok(QneiEstimator::new(OutcomeSource::Gp(outcome), UtilityModel::Known(utility), baseline, &[], config)?.value(batch))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// Optimize all `q·d` coordinates together.
    Joint,
    /// Add one design at a time, conditioning on those already chosen.
    SequentialGreedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub designs: Vec<Vec<f64>>,
    pub value: f64,
    pub degraded: bool,
}

/// Maximizes the SAA estimate over batches of `q` designs.
pub fn optimize_batch(
    source: OutcomeSource<'_>,
    utility: UtilityModel<'_>,
    baseline: &[Vec<f64>],
    q: usize,
    mode: BatchMode,
    config: &QneiConfig,
    optimizer: &OptimizerConfig,
) -> Result<BatchResult> {
    if q == 0 {
        return validation("batch size must be at least 1");
    }
    let bounds = source.bounds().clone();
    let d = bounds.dim();
    match mode {
        BatchMode::Joint => {
            let est = QneiEstimator::new(source, utility, baseline, &[], config)?;
            let obj = FnObjective(|z: &[f64]| est.value(&z.chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>()));
            let r = maximize(&obj, &bounds.repeat(q), optimizer, &[])?;
            Ok(BatchResult { designs: r.x.chunks(d).map(|c| c.to_vec()).collect(), value: r.value, degraded: r.degraded })
        }
        BatchMode::SequentialGreedy => {
            let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(q);
            let mut degraded = false;
            let mut value = 0.0;
            for t in 0..q {
                let est = QneiEstimator::new(source, utility, baseline, &chosen, config)?;
                let obj = FnObjective(|x: &[f64]| est.value(&[x.to_vec()]));
                let r = maximize(&obj, &bounds, &optimizer.with_seed(qmc::derive_seed(optimizer.seed, t as u64)), &[])?;
                degraded |= r.degraded;
                value = r.value;
                chosen.push(r.x);
            }
            Ok(BatchResult { designs: chosen, value, degraded })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{ExperimentDataset, FitConfig};

    fn setup() -> (OutcomeGp, Vec<Vec<f64>>) {
        let bounds = Bounds::unit(2);
        let mut data = ExperimentDataset::new(bounds.clone(), 2);
        let xs = qmc::box_points(8, &bounds.lower, &bounds.upper, 5);
        for x in &xs {
            data.push(x.clone(), vec![x[0] + 0.3 * x[1], (3.0 * x[1]).sin()]).unwrap();
        }
        (OutcomeGp::fit(&data, &FitConfig::default()).unwrap(), xs)
    }

    #[test]
    fn nonnegative_and_monotone_in_batch() {
        let (model, xs) = setup();
        let u = |y: &[f64]| y[0] + y[1];
        let cfg = QneiConfig::default();
        let est = QneiEstimator::new(OutcomeSource::Gp(&model), UtilityModel::Known(&u), &xs, &[], &cfg).unwrap();
        let a = vec![0.9, 0.5];
        let b = vec![0.2, 0.1];
        let single = est.value(&[a.clone()]);
        let pair = est.value(&[a, b]);
        assert!(single >= 0.0 && pair >= single - 1e-12);
        assert!(est.value(&[xs[0].clone()]) < 1e-3);
    }

    #[test]
    fn pending_points_match_joint_batch() {
        let (model, xs) = setup();
        let u = |y: &[f64]| y[0] - y[1];
        let cfg = QneiConfig::default();
        let a = vec![0.7, 0.2];
        let b = vec![0.1, 0.9];
        let joint = QneiEstimator::new(OutcomeSource::Gp(&model), UtilityModel::Known(&u), &xs, &[], &cfg).unwrap();
        let staged = QneiEstimator::new(OutcomeSource::Gp(&model), UtilityModel::Known(&u), &xs, &[a.clone()], &cfg).unwrap();
        assert!((joint.value(&[a, b.clone()]) - staged.value(&[b])).abs() < 1e-9);
    }

    #[test]
    fn empty_baseline_is_rejected() {
        let (model, _) = setup();
        let u = |y: &[f64]| y[0];
        assert!(true_utility_qnei(&model, &u, &[vec![0.5, 0.5]], &[], &QneiConfig::default()).is_err());
    }
}
