//! Preference-exploration acquisition functions and query selection.

use crate::error::{validation, BopeError, Result};
use crate::gp::{GaussianPosterior, OutcomeGp};
use crate::kernel::Kernel;
use crate::linalg::psd_factor;
use crate::optim::{maximize, Bounds, GradObjective, OptimResult, OptimizerConfig};
use crate::paths::OutcomeMap;
use crate::pref::{PrefGp, PreferenceDataset, Query, Response};
use crate::qmc;
use crate::stats::{entropy_of_probit, entropy_of_probit_deriv, norm_cdf, norm_pdf};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Below this standard deviation EUBO uses its σ → 0 limit.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Constant in the noisy-max lower bound, `e^{-1/2}/√2`.
pub fn noisy_max_constant() -> f64 {
    (-0.5f64).exp() / std::f64::consts::SQRT_2
}

/// `Φ((r1−r2)/√2λ)·r1 + Φ((r2−r1)/√2λ)·r2`, the expected utility of the chosen
/// option when the DM's responses follow the probit model.
pub fn noisy_max_lhs(r1: f64, r2: f64, lambda: f64) -> f64 {
    let s = std::f64::consts::SQRT_2 * lambda;
    norm_cdf((r1 - r2) / s) * r1 + norm_cdf((r2 - r1) / s) * r2
}

/// EUBO from the moments of `g(y1)`, `g(y2)` and their difference.
pub fn eubo_from_moments(mu1: f64, mu2: f64, var_diff: f64) -> f64 {
    let delta = mu1 - mu2;
    let sigma = var_diff.max(0.0).sqrt();
    if sigma < SIGMA_FLOOR {
        return delta.max(0.0) + mu2;
    }
    let u = delta / sigma;
    mu2 + delta * norm_cdf(u) + sigma * norm_pdf(u)
}

/// Moments of `(g(y1), g(y2))` under the preference posterior, with gradients.
#[derive(Clone, Debug)]
pub struct PairMoments {
    pub mu1: f64,
    pub mu2: f64,
    pub var_diff: f64,
    pub dmu1: Vec<f64>,
    pub dmu2: Vec<f64>,
    /// ∂var_diff/∂y1 and ∂var_diff/∂y2.
    pub dvar1: Vec<f64>,
    pub dvar2: Vec<f64>,
}

pub fn pair_moments(model: &PrefGp, y1: &[f64], y2: &[f64], with_grad: bool) -> PairMoments {
    let dim = model.dim();
    let kern = model.kernel();
    let prior = model.kfun(y1, y1) + model.kfun(y2, y2) - 2.0 * model.kfun(y1, y2);
    let mut out = PairMoments {
        mu1: 0.0,
        mu2: 0.0,
        var_diff: prior,
        dmu1: vec![0.0; dim],
        dmu2: vec![0.0; dim],
        dvar1: vec![0.0; dim],
        dvar2: vec![0.0; dim],
    };
    if with_grad {
        let mut buf = vec![0.0; dim];
        kern.grad_a(y1, y2, &mut buf);
        for c in 0..dim {
            out.dvar1[c] = -2.0 * buf[c];
        }
        kern.grad_a(y2, y1, &mut buf);
        for c in 0..dim {
            out.dvar2[c] = -2.0 * buf[c];
        }
    }
    if model.points().is_empty() {
        out.var_diff = out.var_diff.max(0.0);
        return out;
    }
    let k1 = model.kstar(y1);
    let k2 = model.kstar(y2);
    let alpha = model.alpha();
    out.mu1 = k1.dot(alpha);
    out.mu2 = k2.dot(alpha);
    let dk = &k1 - &k2;
    let qdk = model.q() * &dk;
    out.var_diff = (prior - dk.dot(&qdk)).max(0.0);
    if with_grad {
        let j1 = model.kstar_jacobian(y1);
        let j2 = model.kstar_jacobian(y2);
        let a1 = j1.tr_mul(alpha);
        let a2 = j2.tr_mul(alpha);
        let q1 = j1.tr_mul(&qdk);
        let q2 = j2.tr_mul(&qdk);
        for c in 0..dim {
            out.dmu1[c] = a1[c];
            out.dmu2[c] = a2[c];
            out.dvar1[c] -= 2.0 * q1[c];
            out.dvar2[c] += 2.0 * q2[c];
        }
    }
    out
}

/// Closed-form `E[max{g(y1), g(y2)}]` under the Laplace posterior.
pub fn eubo_analytic(model: &PrefGp, y1: &[f64], y2: &[f64]) -> Result<f64> {
    check_pair(model, y1, y2)?;
    let m = pair_moments(model, y1, y2, false);
    Ok(eubo_from_moments(m.mu1, m.mu2, m.var_diff))
}

/// EUBO value with gradients with respect to `y1` and `y2`. The standard
/// deviation is floored at `SIGMA_FLOOR` inside the gradient.
pub fn eubo_gradient(model: &PrefGp, y1: &[f64], y2: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_pair(model, y1, y2)?;
    let m = pair_moments(model, y1, y2, true);
    Ok(eubo_with_grad(&m))
}

fn eubo_with_grad(m: &PairMoments) -> (f64, Vec<f64>, Vec<f64>) {
    let value = eubo_from_moments(m.mu1, m.mu2, m.var_diff);
    let sigma = m.var_diff.sqrt().max(SIGMA_FLOOR);
    let u = (m.mu1 - m.mu2) / sigma;
    let (cdf, pdf) = (norm_cdf(u), norm_pdf(u));
    let dsig = pdf / (2.0 * sigma);
    let g1 = (0..m.dmu1.len()).map(|c| cdf * m.dmu1[c] + dsig * m.dvar1[c]).collect();
    let g2 = (0..m.dmu2.len()).map(|c| (1.0 - cdf) * m.dmu2[c] + dsig * m.dvar2[c]).collect();
    (value, g1, g2)
}

fn check_pair(model: &PrefGp, y1: &[f64], y2: &[f64]) -> Result<()> {
    if y1.len() != model.dim() || y2.len() != model.dim() {
        return validation(format!("query outcomes must have dimension {}", model.dim()));
    }
    Ok(())
}

/// Fixed quasi-random standard-normal base samples for MC-BALD.
pub fn bald_base_samples(n_mc: usize, seed: u64) -> Vec<f64> {
    (0..n_mc as u64).map(|i| qmc::normal(i, 0, seed)).collect()
}

/// MC-BALD from the difference moments: the entropy of the marginal response
/// `Φ(μ/√(σ²+1))` minus the average entropy of `Φ(μ + σε)` over base samples.
pub fn bald_from_moments(mu: f64, var: f64, eps: &[f64]) -> f64 {
    let sigma = var.max(0.0).sqrt();
    let h_post = entropy_of_probit(mu / (var.max(0.0) + 1.0).sqrt());
    let h_cond = eps.iter().map(|e| entropy_of_probit(mu + sigma * e)).sum::<f64>() / eps.len() as f64;
    (h_post - h_cond).clamp(0.0, 1.0)
}

pub fn mc_bald(model: &PrefGp, y1: &[f64], y2: &[f64], n_mc: usize, seed: u64) -> Result<f64> {
    check_pair(model, y1, y2)?;
    if n_mc == 0 {
        return validation("n_mc must be at least 1");
    }
    let m = pair_moments(model, y1, y2, false);
    Ok(bald_from_moments(m.mu1 - m.mu2, m.var_diff, &bald_base_samples(n_mc, seed)))
}

fn bald_with_grad(m: &PairMoments, eps: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mu = m.mu1 - m.mu2;
    let var = m.var_diff.max(0.0);
    let sigma = var.sqrt();
    let s1 = (var + 1.0).sqrt();
    let a = mu / s1;
    let h_post = entropy_of_probit(a);
    let dh_post = entropy_of_probit_deriv(a);
    let (mut h_cond, mut dmu_c, mut dsig_c) = (0.0, 0.0, 0.0);
    for e in eps {
        let s = mu + sigma * e;
        h_cond += entropy_of_probit(s);
        let d = entropy_of_probit_deriv(s);
        dmu_c += d;
        dsig_c += d * e;
    }
    let n = eps.len() as f64;
    h_cond /= n;
    dmu_c /= n;
    dsig_c /= n;
    let dmu = dh_post / s1 - dmu_c;
    let dsig_dvar = if sigma > 1e-9 { 0.5 / sigma } else { 0.0 };
    let dvar = -dh_post * mu / (2.0 * s1 * s1 * s1) - dsig_c * dsig_dvar;
    let g1 = (0..m.dmu1.len()).map(|c| dmu * m.dmu1[c] + dvar * m.dvar1[c]).collect();
    let g2 = (0..m.dmu2.len()).map(|c| -dmu * m.dmu2[c] + dvar * m.dvar2[c]).collect();
    (h_post - h_cond, g1, g2)
}

/// Preference-exploration strategy identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeStrategy {
    EuboZeta,
    EuboFtilde,
    EuboY0,
    BaldFtilde,
    BaldY0,
    RandomFtilde,
    RandomY0,
    PboTs,
    PboEubo,
    /// No preference exploration (for baselines that never query the DM).
    None,
}

impl PeStrategy {
    pub const ALL: [PeStrategy; 10] = [
        PeStrategy::EuboZeta,
        PeStrategy::EuboFtilde,
        PeStrategy::EuboY0,
        PeStrategy::BaldFtilde,
        PeStrategy::BaldY0,
        PeStrategy::RandomFtilde,
        PeStrategy::RandomY0,
        PeStrategy::PboTs,
        PeStrategy::PboEubo,
        PeStrategy::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeStrategy::EuboZeta => "eubo-zeta",
            PeStrategy::EuboFtilde => "eubo-ftilde",
            PeStrategy::EuboY0 => "eubo-y0",
            PeStrategy::BaldFtilde => "bald-ftilde",
            PeStrategy::BaldY0 => "bald-y0",
            PeStrategy::RandomFtilde => "random-ftilde",
            PeStrategy::RandomY0 => "random-y0",
            PeStrategy::PboTs => "pbo-ts",
            PeStrategy::PboEubo => "pbo-eubo",
            PeStrategy::None => "none",
        }
    }

    pub fn rule(self) -> Option<QueryRule> {
        match self {
            PeStrategy::EuboZeta | PeStrategy::EuboFtilde | PeStrategy::EuboY0 => Some(QueryRule::Eubo),
            PeStrategy::BaldFtilde | PeStrategy::BaldY0 => Some(QueryRule::Bald),
            PeStrategy::RandomFtilde | PeStrategy::RandomY0 => Some(QueryRule::Random),
            _ => None,
        }
    }

    pub fn is_pbo(self) -> bool {
        matches!(self, PeStrategy::PboTs | PeStrategy::PboEubo)
    }
}

impl fmt::Display for PeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeStrategy {
    type Err = BopeError;

    fn from_str(s: &str) -> Result<Self> {
        PeStrategy::ALL.iter().copied().find(|p| p.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = PeStrategy::ALL.iter().map(|p| p.as_str()).collect();
            BopeError::Validation(format!("unknown PE strategy '{s}'; valid: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryRule {
    Random,
    Bald,
    Eubo,
}

pub const BALD_N_MC: usize = 1024;

/// Where query outcomes are searched: a box in outcome space or the image of
/// the design space under a sample path.
pub enum SearchSpace<'a> {
    Box(Bounds),
    Path(&'a dyn OutcomeMap),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryCandidate {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    /// Generating designs when the outcomes came from a search-space map.
    pub x1: Option<Vec<f64>>,
    pub x2: Option<Vec<f64>>,
    /// Optimizer fell back to its best raw candidate.
    pub degraded: bool,
}

impl QueryCandidate {
    pub fn query(&self) -> Query {
        Query { y1: self.y1.clone(), y2: self.y2.clone() }
    }
}

/// Selects a query under `rule`, maximizing the acquisition over `Y × Y`
/// (box search) or over `X × X` through the path (path search).
pub fn select_query(
    rule: QueryRule,
    model: &PrefGp,
    search: &SearchSpace<'_>,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<QueryCandidate> {
    let k = model.dim();
    match search {
        SearchSpace::Box(b) if b.dim() != k => return validation("search box dimension does not match preference model"),
        SearchSpace::Path(p) if p.k() != k => return validation("path outcome dimension does not match preference model"),
        _ => {}
    }
    if rule == QueryRule::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = match search {
            SearchSpace::Box(b) => b,
            SearchSpace::Path(p) => p.bounds(),
        };
        let mut draw = || -> Vec<f64> {
            bounds.lower.iter().zip(&bounds.upper).map(|(l, u)| l + (u - l) * rng.gen::<f64>()).collect()
        };
        let (a, b) = (draw(), draw());
        return Ok(match search {
            SearchSpace::Box(_) => QueryCandidate { y1: a, y2: b, x1: None, x2: None, degraded: false },
            SearchSpace::Path(p) => QueryCandidate { y1: p.eval(&a), y2: p.eval(&b), x1: Some(a), x2: Some(b), degraded: false },
        });
    }
    let eps = bald_base_samples(BALD_N_MC, qmc::derive_seed(seed, 1));
    let acq = |y1: &[f64], y2: &[f64], grad: bool| -> (f64, Vec<f64>, Vec<f64>) {
        let m = pair_moments(model, y1, y2, grad);
        match rule {
            QueryRule::Eubo => {
                if grad {
                    eubo_with_grad(&m)
                } else {
                    (eubo_from_moments(m.mu1, m.mu2, m.var_diff), vec![], vec![])
                }
            }
            _ => {
                if grad {
                    bald_with_grad(&m, &eps)
                } else {
                    (bald_from_moments(m.mu1 - m.mu2, m.var_diff, &eps), vec![], vec![])
                }
            }
        }
    };
    let config = optimizer.with_seed(qmc::derive_seed(seed, 2));
    match search {
        SearchSpace::Box(b) => {
            let obj = GradObjective(|z: &[f64], g: Option<&mut [f64]>| {
                let (v, g1, g2) = acq(&z[..k], &z[k..], g.is_some());
                if let Some(g) = g {
                    g[..k].copy_from_slice(&g1);
                    g[k..].copy_from_slice(&g2);
                }
                v
            });
            let r = maximize(&obj, &b.repeat(2), &config, &[])?;
            Ok(QueryCandidate { y1: r.x[..k].to_vec(), y2: r.x[k..].to_vec(), x1: None, x2: None, degraded: r.degraded })
        }
        SearchSpace::Path(p) => {
            let d = p.d();
            let obj = GradObjective(|z: &[f64], g: Option<&mut [f64]>| match g {
                None => acq(&p.eval(&z[..d]), &p.eval(&z[d..]), false).0,
                Some(g) => {
                    let (y1, j1) = p.eval_jac(&z[..d]);
                    let (y2, j2) = p.eval_jac(&z[d..]);
                    let (v, g1, g2) = acq(&y1, &y2, true);
                    let gx1 = j1.tr_mul(&DVector::from_vec(g1));
                    let gx2 = j2.tr_mul(&DVector::from_vec(g2));
                    g[..d].copy_from_slice(gx1.as_slice());
                    g[d..].copy_from_slice(gx2.as_slice());
                    v
                }
            });
            let r = maximize(&obj, &p.bounds().repeat(2), &config, &[])?;
            let (x1, x2) = (r.x[..d].to_vec(), r.x[d..].to_vec());
            Ok(QueryCandidate { y1: p.eval(&x1), y2: p.eval(&x2), x1: Some(x1), x2: Some(x2), degraded: r.degraded })
        }
    }
}

/// Draws one joint posterior sample of `g` at `points`.
fn joint_sample(post: &GaussianPosterior, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let l = psd_factor(&post.cov);
    let z = DVector::from_fn(post.mean.len(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    (&post.mean + l * z).as_slice().to_vec()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// PBO Thompson sampling over observed designs: the argmaxes of two
/// independent posterior samples of the latent objective. Returns indices.
pub fn pbo_thompson(latent: &PrefGp, designs: &[Vec<f64>], seed: u64) -> Result<(usize, usize)> {
    let distinct = distinct_count(designs);
    if distinct < 2 {
        return validation("PBO needs at least 2 distinct observed designs");
    }
    if designs.len() == 2 {
        return Ok((0, 1));
    }
    let post = latent.posterior(designs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = argmax(&joint_sample(&post, &mut rng));
    let mut last = Vec::new();
    for _ in 0..=10 {
        last = joint_sample(&post, &mut rng);
        let second = argmax(&last);
        if designs[second] != designs[first] {
            return Ok((first, second));
        }
    }
    let mut order: Vec<usize> = (0..designs.len()).collect();
    order.sort_by(|&a, &b| last[b].total_cmp(&last[a]));
    let runner_up = order.into_iter().find(|&i| designs[i] != designs[first]).expect("two distinct designs");
    Ok((first, runner_up))
}

/// PBO with EUBO: the observed pair maximizing EUBO of the latent model.
pub fn pbo_eubo(latent: &PrefGp, designs: &[Vec<f64>]) -> Result<(usize, usize)> {
    if distinct_count(designs) < 2 {
        return validation("PBO needs at least 2 distinct observed designs");
    }
    let mut best = (f64::NEG_INFINITY, 0, 1);
    for i in 0..designs.len() {
        for j in 0..i {
            if designs[i] == designs[j] {
                continue;
            }
            let v = eubo_analytic(latent, &designs[i], &designs[j])?;
            if v > best.0 {
                best = (v, i, j);
            }
        }
    }
    Ok((best.1, best.2))
}

fn distinct_count(designs: &[Vec<f64>]) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for d in designs {
        if !seen.contains(&d) {
            seen.push(d);
        }
    }
    seen.len()
}

/// One-step value `V` of querying `(Y[i], Y[j])` on a finite outcome set.
///
/// The joint posterior of `g` over `Y` is treated as exactly Gaussian and
/// conditioned exactly on each hypothetical response (`λ = 0` truncates on
/// the sign of the difference, `λ > 0` uses the probit channel).
pub fn brute_force_v(post: &GaussianPosterior, i: usize, j: usize, lambda: f64) -> Result<f64> {
    let n = post.mean.len();
    if i >= n || j >= n {
        return validation("query index out of range");
    }
    if !(lambda >= 0.0) {
        return validation("lambda must be non-negative");
    }
    let mu = &post.mean;
    let base = mu.max();
    let var_d = (post.cov[(i, i)] + post.cov[(j, j)] - 2.0 * post.cov[(i, j)]).max(0.0);
    let s = (var_d + 2.0 * lambda * lambda).sqrt();
    if s < 1e-14 {
        return Ok(0.0);
    }
    let a = (mu[i] - mu[j]) / s;
    let cov_d: Vec<f64> = (0..n).map(|y| post.cov[(y, i)] - post.cov[(y, j)]).collect();
    let mut v = 0.0;
    for sign in [1.0, -1.0] {
        let p = norm_cdf(sign * a);
        if p <= 0.0 {
            continue;
        }
        let shift = sign * norm_pdf(a) / (p * s);
        let best = (0..n).map(|y| mu[y] + cov_d[y] * shift).fold(f64::NEG_INFINITY, f64::max);
        v += p * best;
    }
    Ok(v - base)
}

/// `V` computed by refitting the Laplace posterior on each hypothetical
/// response (requires `λ > 0`); `ys` is the finite outcome set.
pub fn brute_force_v_laplace(
    data: &PreferenceDataset,
    model: &PrefGp,
    ys: &[Vec<f64>],
    i: usize,
    j: usize,
) -> Result<f64> {
    let lambda = model.lambda();
    if lambda <= 0.0 {
        return validation("Laplace refits need lambda > 0");
    }
    let base = ys.iter().map(|y| model.mean(y)).fold(f64::NEG_INFINITY, f64::max);
    let (mu1, mu2, var) = {
        let m = pair_moments(model, &ys[i], &ys[j], false);
        (m.mu1, m.mu2, m.var_diff)
    };
    let p1 = norm_cdf((mu1 - mu2) / (var + 2.0 * lambda * lambda).sqrt());
    let query = Query::new(ys[i].clone(), ys[j].clone())?;
    let mut v = 0.0;
    for (r, p) in [(Response::First, p1), (Response::Second, 1.0 - p1)] {
        let mut d = data.clone();
        d.push(&query, r)?;
        let refit = PrefGp::fit_warm(&d, model.hyperparams(), Some(model))?;
        let best = ys.iter().map(|y| refit.mean(y)).fold(f64::NEG_INFINITY, f64::max);
        v += p * best;
    }
    Ok(v - base)
}

/// Utility model for best-guess reporting and experiment selection.
#[derive(Clone, Copy)]
pub enum UtilityModel<'a> {
    Pref(&'a PrefGp),
    Known(&'a (dyn Fn(&[f64]) -> f64 + Sync)),
}

pub const BEST_GUESS_SAMPLES: usize = 64;

/// SAA maximizer of `E[g(f(x))]`: averages the utility over fixed outcome
/// realizations `μ_f(x) + sd_f(x)·z_s` and maximizes over the design box.
/// `extra` seeds the search (typically the evaluated designs).
pub fn posterior_mean_argmax(
    outcome: &OutcomeGp,
    utility: UtilityModel<'_>,
    optimizer: &OptimizerConfig,
    n_samples: usize,
    extra: &[Vec<f64>],
) -> Result<OptimResult> {
    if n_samples == 0 {
        return validation("n_samples must be positive");
    }
    let k = outcome.k();
    let d = outcome.d();
    if let UtilityModel::Pref(p) = utility {
        if p.dim() != k {
            return validation("preference model dimension does not match outcome model");
        }
    }
    let z = qmc::normal_matrix(n_samples, k, qmc::derive_seed(optimizer.seed, 7));
    let obj = GradObjective(|x: &[f64], grad: Option<&mut [f64]>| {
        let p = outcome.predict_with_grad(x);
        let sd: Vec<f64> = p.var.iter().map(|v| v.sqrt()).collect();
        let mut total = 0.0;
        let mut gx = vec![0.0; d];
        let want = grad.is_some();
        for s in 0..n_samples {
            let y: Vec<f64> = (0..k).map(|o| p.mean[o] + sd[o] * z[(s, o)]).collect();
            match utility {
                UtilityModel::Pref(m) => {
                    if want {
                        let (v, gy) = m.mean_grad(&y);
                        total += v;
                        for o in 0..k {
                            let dsd = |j: usize| if p.var[o] > 1e-12 { p.dvar[o][j] / (2.0 * sd[o]) } else { 0.0 };
                            for j in 0..d {
                                gx[j] += gy[o] * (p.dmean[o][j] + z[(s, o)] * dsd(j));
                            }
                        }
                    } else {
                        total += m.mean(&y);
                    }
                }
                UtilityModel::Known(u) => total += u(&y),
            }
        }
        let n = n_samples as f64;
        if let Some(g) = grad {
            match utility {
                UtilityModel::Pref(_) => {
                    for j in 0..d {
                        g[j] = gx[j] / n;
                    }
                }
                UtilityModel::Known(_) => {
                    let h = 1e-6;
                    let f = |xx: &[f64]| -> f64 {
                        let (m, v) = outcome.predict(xx);
                        (0..n_samples)
                            .map(|s| u_eval(utility, &(0..k).map(|o| m[o] + v[o].sqrt() * z[(s, o)]).collect::<Vec<_>>()))
                            .sum::<f64>()
                            / n
                    };
                    let mut xp = x.to_vec();
                    for j in 0..d {
                        let orig = xp[j];
                        xp[j] = orig + h;
                        let fp = f(&xp);
                        xp[j] = orig - h;
                        let fm = f(&xp);
                        xp[j] = orig;
                        g[j] = (fp - fm) / (2.0 * h);
                    }
                }
            }
        }
        total / n
    });
    maximize(&obj, outcome.bounds(), optimizer, extra)
}

fn u_eval(u: UtilityModel<'_>, y: &[f64]) -> f64 {
    match u {
        UtilityModel::Pref(m) => m.mean(y),
        UtilityModel::Known(f) => f(y),
    }
}

/// Exhaustive EUBO argmax over all unordered pairs of a finite outcome set,
/// using the joint posterior over that set.
pub fn exhaustive_eubo_argmax(post: &GaussianPosterior) -> (usize, usize, f64) {
    let n = post.mean.len();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..i {
            let var = post.cov[(i, i)] + post.cov[(j, j)] - 2.0 * post.cov[(i, j)];
            let v = eubo_from_moments(post.mean[i], post.mean[j], var);
            if v > best.2 {
                best = (i, j, v);
            }
        }
    }
    best
}

/// Dense matrix of `V` over all unordered pairs (upper triangle unused).
pub fn brute_force_v_table(post: &GaussianPosterior, lambda: f64) -> Result<DMatrix<f64>> {
    let n = post.mean.len();
    let mut t = DMatrix::from_element(n, n, f64::NAN);
    for i in 0..n {
        for j in 0..i {
            t[(i, j)] = brute_force_v(post, i, j, lambda)?;
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pref::{PrefGpHyperparams, PreferenceDataset, Query, Response};

    fn model() -> PrefGp {
        let mut d = PreferenceDataset::new(2);
        let pts = [[0.1, 0.9], [0.5, 0.2], [0.8, 0.7], [0.3, 0.4]];
        for i in 0..pts.len() {
            for j in 0..i {
                let r = if pts[i][0] + pts[i][1] > pts[j][0] + pts[j][1] { Response::First } else { Response::Second };
                d.push(&Query::new(pts[i].to_vec(), pts[j].to_vec()).unwrap(), r).unwrap();
            }
        }
        let h = PrefGpHyperparams { lengthscales: vec![0.5, 0.5], signal_variance: 1.0, lambda: 0.2 };
        PrefGp::fit(&d, &h).unwrap()
    }

    #[test]
    fn eubo_degenerate_and_symmetric_cases() {
        let m = model();
        let y = [0.4, 0.6];
        assert!((eubo_analytic(&m, &y, &y).unwrap() - m.mean(&y)).abs() < 1e-12);
        assert!((eubo_from_moments(0.3, 0.3, 1.0) - (0.3 + norm_pdf(0.0))).abs() < 1e-15);
        let a = eubo_analytic(&m, &[0.1, 0.2], &[0.9, 0.4]).unwrap();
        let b = eubo_analytic(&m, &[0.9, 0.4], &[0.1, 0.2]).unwrap();
        assert!((a - b).abs() < 1e-10);
        let (_, g1, g2) = eubo_gradient(&m, &y, &y).unwrap();
        assert!(g1.iter().chain(&g2).all(|v| v.is_finite()));
    }

    #[test]
    fn eubo_and_bald_gradients_match_fd() {
        let m = model();
        let (y1, y2) = ([0.2, 0.7], [0.6, 0.3]);
        let (_, g1, g2) = eubo_gradient(&m, &y1, &y2).unwrap();
        let eps = bald_base_samples(512, 3);
        let pm = pair_moments(&m, &y1, &y2, true);
        let (_, b1, b2) = bald_with_grad(&pm, &eps);
        let h = 1e-6;
        for c in 0..4 {
            let eval = |s: f64, bald: bool| {
                let mut a = y1.to_vec();
                let mut b = y2.to_vec();
                if c < 2 { a[c] += s * h } else { b[c - 2] += s * h }
                let pm = pair_moments(&m, &a, &b, false);
                if bald { bald_from_moments(pm.mu1 - pm.mu2, pm.var_diff, &eps) } else { eubo_from_moments(pm.mu1, pm.mu2, pm.var_diff) }
            };
            let fd = (eval(1.0, false) - eval(-1.0, false)) / (2.0 * h);
            let an = if c < 2 { g1[c] } else { g2[c - 2] };
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "eubo {c}: {fd} vs {an}");
            let fd = (eval(1.0, true) - eval(-1.0, true)) / (2.0 * h);
            let an = if c < 2 { b1[c] } else { b2[c - 2] };
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "bald {c}: {fd} vs {an}");
        }
    }

    #[test]
    fn bald_self_comparison_is_zero() {
        let m = model();
        let y = [0.3, 0.3];
        assert!(mc_bald(&m, &y, &y, 1000, 1).unwrap() <= 1e-6);
    }

    #[test]
    fn noisy_max_bound_holds_on_a_grid() {
        let c = noisy_max_constant();
        for r1 in [-1.0, 0.0, 0.3, 2.0] {
            for r2 in [-0.5, 0.3, 1.0] {
                for lam in [0.01, 0.3, 3.0] {
                    assert!(noisy_max_lhs(r1, r2, lam) >= f64::max(r1, r2) - lam * c - 1e-12);
                }
            }
        }
    }

    #[test]
    fn strategy_ids_round_trip() {
        for s in PeStrategy::ALL {
            assert_eq!(s.as_str().parse::<PeStrategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.as_str()));
        }
        assert!("eubo".parse::<PeStrategy>().is_err());
    }

    #[test]
    fn v_of_degenerate_query_is_zero() {
        let m = model();
        let ys = vec![vec![0.1, 0.1], vec![0.5, 0.5], vec![0.9, 0.2]];
        let post = m.posterior(&ys).unwrap();
        assert!(brute_force_v(&post, 1, 1, 0.1).unwrap().abs() < 1e-9);
        for i in 0..3 {
            for j in 0..i {
                assert!(brute_force_v(&post, i, j, 0.0).unwrap() >= -1e-12);
            }
        }
    }
}
