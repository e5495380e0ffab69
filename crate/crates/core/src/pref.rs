//! Pairwise-preference GP with a probit likelihood and a Laplace posterior.
//!
//! The latent utility `g` has a zero-mean GP prior with an RBF ARD kernel. A
//! response `r = 1` to the query `(y1, y2)` has probability
//! `Φ((g(y1) − g(y2)) / (√2 λ))`. The posterior mode is found by damped Newton
//! iterations in whitened coordinates `u = L⁻¹ f` (with `K = L Lᵀ`), where the
//! Hessian `I + Lᵀ W L` is always positive definite.

use crate::error::{validation, BopeError, Result};
use crate::gp::GaussianPosterior;
use crate::kernel::{Kernel, Rbf};
use crate::linalg::{cholesky_jittered, log_det_chol, symmetrize};
use crate::optim::{lbfgsb_maximize, Bounds, GradObjective};
use crate::qmc;
use crate::stats::{inv_mills, log_norm_cdf, norm_cdf};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
}

impl Query {
    pub fn new(y1: Vec<f64>, y2: Vec<f64>) -> Result<Self> {
        if y1.len() != y2.len() || y1.is_empty() {
            return validation("query outcome vectors must be non-empty and of equal length");
        }
        if y1.iter().chain(&y2).any(|v| !v.is_finite()) {
            return validation("query outcome vectors must be finite");
        }
        Ok(Self { y1, y2 })
    }
}

/// The decision-maker's choice: 1 prefers `y1`, 2 prefers `y2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Response {
    First,
    Second,
}

impl TryFrom<u8> for Response {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Response::First),
            2 => Ok(Response::Second),
            other => Err(format!("response must be 1 or 2, got {other}")),
        }
    }
}

impl From<Response> for u8 {
    fn from(r: Response) -> u8 {
        match r {
            Response::First => 1,
            Response::Second => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub r: Response,
}

impl Comparison {
    pub fn winner(&self) -> &[f64] {
        match self.r {
            Response::First => &self.y1,
            Response::Second => &self.y2,
        }
    }

    pub fn loser(&self) -> &[f64] {
        match self.r {
            Response::First => &self.y2,
            Response::Second => &self.y1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub k: usize,
    pub comparisons: Vec<Comparison>,
}

impl PreferenceDataset {
    pub fn new(k: usize) -> Self {
        Self { k, comparisons: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.comparisons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comparisons.is_empty()
    }

    pub fn push(&mut self, query: &Query, r: Response) -> Result<()> {
        if query.y1.len() != self.k || query.y2.len() != self.k {
            return validation(format!("query dimension does not match k = {}", self.k));
        }
        self.comparisons.push(Comparison { y1: query.y1.clone(), y2: query.y2.clone(), r });
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.comparisons {
            if c.y1.len() != self.k || c.y2.len() != self.k {
                return validation("comparison dimension does not match k");
            }
            if c.y1.iter().chain(&c.y2).any(|v| !v.is_finite()) {
                return validation("non-finite outcome in comparison");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefGpHyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub lambda: f64,
}

impl PrefGpHyperparams {
    /// Defaults scaled to the spread of the inputs: half-range lengthscales,
    /// unit signal variance and λ at a tenth of the latent scale.
    pub fn default_for(ranges: &[f64]) -> Self {
        Self {
            lengthscales: ranges.iter().map(|r| 0.5 * r.max(1e-6)).collect(),
            signal_variance: 1.0,
            lambda: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) || !(self.signal_variance > 0.0) {
            return validation("lengthscales and signal variance must be positive");
        }
        if !(self.lambda >= 0.0) {
            return validation("lambda must be non-negative");
        }
        Ok(())
    }
}

/// P(r = 1) under the probit comparison model; λ = 0 is the noiseless step function.
pub fn probit_likelihood(g1: f64, g2: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return validation("lambda must be non-negative");
    }
    if lambda == 0.0 {
        return Ok(if g1 > g2 {
            1.0
        } else if g1 < g2 {
            0.0
        } else {
            0.5
        });
    }
    Ok(norm_cdf((g1 - g2) / (SQRT_2 * lambda)))
}

/// Mode and curvature of the Laplace approximation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceState {
    /// Latent utilities at the distinct comparison outcomes.
    pub latent: DVector<f64>,
    /// Hessian of the negative log posterior at the mode, `K⁻¹ + W`.
    pub hessian: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

pub const NEWTON_TOL: f64 = 1e-6;
pub const NEWTON_MAX_ITERS: usize = 50;
const DEDUP_TOL: f64 = 1e-12;

/// Comparison likelihood terms, grouped by (winner, loser) index pair.
#[derive(Clone, Debug)]
struct Pairs {
    winner: Vec<usize>,
    loser: Vec<usize>,
    count: Vec<f64>,
}

/// Per-pair likelihood quantities at a latent vector.
struct LikTerms {
    z: Vec<f64>,
    /// φ(z)/Φ(z)
    r: Vec<f64>,
    /// r(z + r), the negative second derivative of log Φ
    h: Vec<f64>,
    ll: f64,
}

#[derive(Clone, Debug)]
pub struct PrefGp {
    hyper: PrefGpHyperparams,
    kernel: Rbf,
    nugget: f64,
    points: Vec<Vec<f64>>,
    pairs: Pairs,
    dim: usize,
    l: DMatrix<f64>,
    alpha: DVector<f64>,
    /// (K + W⁻¹)⁻¹
    q: DMatrix<f64>,
    laplace: LaplaceState,
    log_evidence: f64,
    n_comparisons: usize,
}

fn dedup_points(data: &PreferenceDataset) -> (Vec<Vec<f64>>, Pairs) {
    let mut points: Vec<Vec<f64>> = Vec::new();
    let index_of = |y: &[f64], points: &mut Vec<Vec<f64>>| -> usize {
        if let Some(i) = points
            .iter()
            .position(|p| p.iter().zip(y).all(|(a, b)| (a - b).abs() <= DEDUP_TOL))
        {
            i
        } else {
            points.push(y.to_vec());
            points.len() - 1
        }
    };
    let mut pairs = Pairs { winner: vec![], loser: vec![], count: vec![] };
    for c in &data.comparisons {
        let w = index_of(c.winner(), &mut points);
        let l = index_of(c.loser(), &mut points);
        if let Some(p) = (0..pairs.winner.len()).find(|&p| pairs.winner[p] == w && pairs.loser[p] == l) {
            pairs.count[p] += 1.0;
        } else {
            pairs.winner.push(w);
            pairs.loser.push(l);
            pairs.count.push(1.0);
        }
    }
    (points, pairs)
}

impl Pairs {
    fn terms(&self, f: &DVector<f64>, lambda: f64) -> LikTerms {
        let scale = SQRT_2 * lambda;
        let mut t = LikTerms { z: vec![], r: vec![], h: vec![], ll: 0.0 };
        for p in 0..self.winner.len() {
            let z = (f[self.winner[p]] - f[self.loser[p]]) / scale;
            let r = inv_mills(z);
            t.ll += self.count[p] * log_norm_cdf(z);
            t.z.push(z);
            t.r.push(r);
            t.h.push(r * (z + r));
        }
        t
    }

    /// ∇_f log-likelihood.
    fn grad(&self, t: &LikTerms, m: usize, lambda: f64) -> DVector<f64> {
        let mut g = DVector::zeros(m);
        let scale = SQRT_2 * lambda;
        for p in 0..self.winner.len() {
            let v = self.count[p] * t.r[p] / scale;
            g[self.winner[p]] += v;
            g[self.loser[p]] -= v;
        }
        g
    }

    /// Per-pair weights `c` with `W = Σ c (e_w − e_l)(e_w − e_l)ᵀ`.
    fn weights(&self, t: &LikTerms, lambda: f64) -> Vec<f64> {
        let s = 2.0 * lambda * lambda;
        (0..self.winner.len()).map(|p| self.count[p] * t.h[p] / s).collect()
    }
}

impl PrefGp {
    /// Posterior with no comparisons: the GP prior over inputs of dimension `dim`.
    pub fn prior(dim: usize, hyper: PrefGpHyperparams) -> Result<Self> {
        hyper.validate()?;
        if hyper.lengthscales.len() != dim {
            return validation("lengthscale count does not match input dimension");
        }
        let kernel = Rbf::new(hyper.lengthscales.clone(), hyper.signal_variance);
        Ok(Self {
            nugget: 0.0,
            kernel,
            hyper,
            points: vec![],
            pairs: Pairs { winner: vec![], loser: vec![], count: vec![] },
            dim,
            l: DMatrix::zeros(0, 0),
            alpha: DVector::zeros(0),
            q: DMatrix::zeros(0, 0),
            laplace: LaplaceState {
                latent: DVector::zeros(0),
                hessian: DMatrix::zeros(0, 0),
                converged: true,
                iterations: 0,
                grad_norm: 0.0,
            },
            log_evidence: 0.0,
            n_comparisons: 0,
        })
    }

    pub fn fit(data: &PreferenceDataset, hyper: &PrefGpHyperparams) -> Result<Self> {
        Self::fit_warm(data, hyper, None)
    }

    /// Laplace fit; `warm` seeds Newton with a previous model's posterior mean.
    pub fn fit_warm(data: &PreferenceDataset, hyper: &PrefGpHyperparams, warm: Option<&PrefGp>) -> Result<Self> {
        data.validate()?;
        hyper.validate()?;
        if hyper.lengthscales.len() != data.k {
            return validation("lengthscale count does not match outcome dimension");
        }
        if data.is_empty() {
            return Self::prior(data.k, hyper.clone());
        }
        if hyper.lambda <= 0.0 {
            return validation("Laplace fitting requires lambda > 0");
        }
        let (points, pairs) = dedup_points(data);
        let m = points.len();
        let kernel = Rbf::new(hyper.lengthscales.clone(), hyper.signal_variance);
        let k = kernel.gram(&points);
        let (chol, nugget) = cholesky_jittered(&k)
            .ok_or_else(|| BopeError::Numerical("preference kernel matrix is not positive definite".into()))?;
        let l = chol.l();

        let mut u = match warm {
            Some(prev) => {
                let f0 = DVector::from_iterator(m, points.iter().map(|p| prev.mean(p)));
                l.solve_lower_triangular(&f0).unwrap_or_else(|| DVector::zeros(m))
            }
            None => DVector::zeros(m),
        };
        let lambda = hyper.lambda;
        let objective = |u: &DVector<f64>| -> (f64, LikTerms, DVector<f64>) {
            let f = &l * u;
            let t = pairs.terms(&f, lambda);
            (-t.ll + 0.5 * u.norm_squared(), t, f)
        };

        let (mut psi, mut terms, mut f) = objective(&u);
        let mut iterations = 0;
        let mut grad_norm;
        let mut converged = false;
        loop {
            let g_ll = pairs.grad(&terms, m, lambda);
            let grad = &u - l.tr_mul(&g_ll);
            grad_norm = grad.norm();
            if grad_norm < NEWTON_TOL {
                converged = true;
                break;
            }
            if iterations >= NEWTON_MAX_ITERS {
                break;
            }
            iterations += 1;
            let b = whitened_hessian(&l, &pairs, &pairs.weights(&terms, lambda));
            let chol_b = b
                .cholesky()
                .ok_or_else(|| BopeError::Numerical("Laplace Hessian is not positive definite".into()))?;
            let step = -chol_b.solve(&grad);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &u + &step * t;
                let (psi_c, terms_c, f_c) = objective(&cand);
                if psi_c.is_finite() && psi_c <= psi {
                    u = cand;
                    psi = psi_c;
                    terms = terms_c;
                    f = f_c;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if !converged {
            return Err(BopeError::Convergence { iterations, grad_norm });
        }

        let weights = pairs.weights(&terms, lambda);
        let b = whitened_hessian(&l, &pairs, &weights);
        let chol_b = b
            .clone()
            .cholesky()
            .ok_or_else(|| BopeError::Numerical("Laplace Hessian is not positive definite".into()))?;
        let l_inv = l.clone().solve_lower_triangular(&DMatrix::identity(m, m)).expect("triangular inverse");
        let b_inv = chol_b.inverse();
        let q = symmetrize(&(l_inv.transpose() * (DMatrix::identity(m, m) - &b_inv) * &l_inv));
        let hessian = symmetrize(&(l_inv.transpose() * &b * &l_inv));
        let alpha = l.tr_solve_lower_triangular(&u).expect("triangular solve");
        let log_evidence = terms.ll - 0.5 * u.norm_squared() - 0.5 * log_det_chol(&chol_b);

        Ok(Self {
            hyper: hyper.clone(),
            kernel,
            nugget,
            points,
            pairs,
            dim: data.k,
            l,
            alpha,
            q,
            laplace: LaplaceState { latent: f, hessian, converged, iterations, grad_norm },
            log_evidence,
            n_comparisons: data.len(),
        })
    }

    pub fn hyperparams(&self) -> &PrefGpHyperparams {
        &self.hyper
    }

    pub fn laplace(&self) -> &LaplaceState {
        &self.laplace
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_comparisons(&self) -> usize {
        self.n_comparisons
    }

    /// Laplace approximation to the log marginal likelihood of the responses.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    pub fn lambda(&self) -> f64 {
        self.hyper.lambda
    }

    fn same_point(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= DEDUP_TOL)
    }

    /// Prior covariance including the diagonal nugget on coincident points.
    pub(crate) fn kfun(&self, a: &[f64], b: &[f64]) -> f64 {
        let v = self.kernel.eval(a, b);
        if self.nugget > 0.0 && Self::same_point(a, b) {
            v + self.nugget
        } else {
            v
        }
    }

    pub(crate) fn kstar(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.points.len(), self.points.iter().map(|p| self.kfun(y, p)))
    }

    /// ∂k(y, pᵢ)/∂y for all training points, as an `m × dim` matrix.
    pub(crate) fn kstar_jacobian(&self, y: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.points.len(), self.dim);
        let mut buf = vec![0.0; self.dim];
        for (i, p) in self.points.iter().enumerate() {
            self.kernel.grad_a(y, p, &mut buf);
            for c in 0..self.dim {
                j[(i, c)] = buf[c];
            }
        }
        j
    }

    pub(crate) fn kernel(&self) -> &Rbf {
        &self.kernel
    }

    pub(crate) fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub(crate) fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn mean(&self, y: &[f64]) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.kstar(y).dot(&self.alpha)
    }

    pub fn mean_grad(&self, y: &[f64]) -> (f64, Vec<f64>) {
        if self.points.is_empty() {
            return (0.0, vec![0.0; self.dim]);
        }
        let m = self.mean(y);
        let g = self.kstar_jacobian(y).tr_mul(&self.alpha);
        (m, g.as_slice().to_vec())
    }

    fn check(&self, points: &[Vec<f64>]) -> Result<()> {
        if points.iter().any(|p| p.len() != self.dim) {
            return validation(format!("points must have dimension {}", self.dim));
        }
        Ok(())
    }

    /// Approximate posterior of `g` jointly at `points`.
    pub fn posterior(&self, points: &[Vec<f64>]) -> Result<GaussianPosterior> {
        self.check(points)?;
        let p = points.len();
        let kss = DMatrix::from_fn(p, p, |i, j| self.kfun(&points[i], &points[j]));
        if self.points.is_empty() {
            return Ok(GaussianPosterior { mean: DVector::zeros(p), cov: kss });
        }
        let ks = DMatrix::from_fn(self.points.len(), p, |i, j| self.kfun(&self.points[i], &points[j]));
        let mean = ks.tr_mul(&self.alpha);
        let cov = symmetrize(&(kss - ks.tr_mul(&(&self.q * &ks))));
        Ok(GaussianPosterior { mean, cov })
    }

    /// Mean and variance of `g(y1) − g(y2)`.
    pub fn diff_moments(&self, y1: &[f64], y2: &[f64]) -> (f64, f64) {
        let prior_var = self.kfun(y1, y1) + self.kfun(y2, y2) - 2.0 * self.kfun(y1, y2);
        if self.points.is_empty() {
            return (0.0, prior_var.max(0.0));
        }
        let dk = self.kstar(y1) - self.kstar(y2);
        let mu = dk.dot(&self.alpha);
        let var = prior_var - dk.dot(&(&self.q * &dk));
        (mu, var.max(0.0))
    }

    /// Joint posterior of `g` at the training points and the comparison pairs,
    /// exposed for oracle tests.
    pub fn training_pairs(&self) -> Vec<(usize, usize, f64)> {
        (0..self.pairs.winner.len())
            .map(|p| (self.pairs.winner[p], self.pairs.loser[p], self.pairs.count[p]))
            .collect()
    }

    /// Gradient of the Laplace log evidence with respect to
    /// `[log ℓ₁..log ℓ_k, log λ]` (signal variance held fixed).
    pub fn log_evidence_grad(&self) -> Vec<f64> {
        let k = self.dim;
        let m = self.points.len();
        let mut grad = vec![0.0; k + 1];
        if m == 0 {
            return grad;
        }
        let lambda = self.hyper.lambda;
        let f = &self.laplace.latent;
        let terms = self.pairs.terms(f, lambda);
        let g = &self.alpha; // K⁻¹ f̂ = ∇ log-likelihood at the mode
        let kmat = &self.l * self.l.transpose();
        // Σ = (K⁻¹ + W)⁻¹ = K − K Q K
        let sigma = &kmat - &kmat * &self.q * &kmat;
        let scale = SQRT_2 * lambda;
        let npairs = self.pairs.winner.len();
        let v: Vec<f64> = (0..npairs)
            .map(|p| {
                let (w, l) = (self.pairs.winner[p], self.pairs.loser[p]);
                sigma[(w, w)] + sigma[(l, l)] - 2.0 * sigma[(w, l)]
            })
            .collect();
        // ∂(−½ log|B|)/∂f̂
        let mut s2 = DVector::zeros(m);
        for p in 0..npairs {
            let (z, r, h) = (terms.z[p], terms.r[p], terms.h[p]);
            let dh = r - h * (z + 2.0 * r);
            let dc = self.pairs.count[p] * dh / (2.0 * lambda * lambda);
            let val = -0.5 * dc * v[p] / scale;
            s2[self.pairs.winner[p]] += val;
            s2[self.pairs.loser[p]] -= val;
        }
        // (I − K Q)ᵀ s2, shared by every implicit term
        let s2_proj = &s2 - self.q.tr_mul(&kmat.tr_mul(&s2));

        let mut buf = vec![0.0; k + 1];
        let mut dks = vec![DMatrix::<f64>::zeros(m, m); k];
        for i in 0..m {
            for j in 0..=i {
                self.kernel.grad_log_hyper(&self.points[i], &self.points[j], &mut buf);
                for c in 0..k {
                    dks[c][(i, j)] = buf[c];
                    dks[c][(j, i)] = buf[c];
                }
            }
        }
        for c in 0..k {
            let dk = &dks[c];
            let dk_g = dk * g;
            let explicit = 0.5 * g.dot(&dk_g) - 0.5 * (&self.q).component_mul(dk).sum();
            grad[c] = explicit + s2_proj.dot(&dk_g);
        }

        // λ: explicit likelihood terms plus the implicit shift of the mode
        let mut dll = 0.0;
        let mut dtrace = 0.0;
        let mut dgdl = DVector::zeros(m);
        for p in 0..npairs {
            let (z, r, h) = (terms.z[p], terms.r[p], terms.h[p]);
            let cnt = self.pairs.count[p];
            dll += cnt * r * (-z / lambda);
            let dh = r - h * (z + 2.0 * r);
            let dc_dl = -cnt * (dh * z + 2.0 * h) / (2.0 * lambda.powi(3));
            dtrace += dc_dl * v[p];
            let gv = cnt * (h * z - r) / (SQRT_2 * lambda * lambda);
            dgdl[self.pairs.winner[p]] += gv;
            dgdl[self.pairs.loser[p]] -= gv;
        }
        let implicit = s2_proj.dot(&(&kmat * dgdl));
        grad[k] = lambda * (dll - 0.5 * dtrace + implicit);
        grad
    }
}

/// `I + Lᵀ W L` with `W = Σ c (e_w − e_l)(e_w − e_l)ᵀ`.
fn whitened_hessian(l: &DMatrix<f64>, pairs: &Pairs, weights: &[f64]) -> DMatrix<f64> {
    let m = l.nrows();
    let mut b = DMatrix::identity(m, m);
    for p in 0..pairs.winner.len() {
        let t = (l.row(pairs.winner[p]) - l.row(pairs.loser[p])).transpose();
        b.ger(weights[p], &t, &t, 1.0);
    }
    b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefFitConfig {
    pub n_restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for PrefFitConfig {
    fn default() -> Self {
        Self { n_restarts: 4, max_iters: 50, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefHyperFit {
    pub hyper: PrefGpHyperparams,
    /// Every restart failed and defaults were returned.
    pub fallback: bool,
}

pub const LAMBDA_BOUNDS: (f64, f64) = (1e-3, 1e1);

/// Per-dimension spread of the distinct comparison outcomes, floored at 1e-6.
pub fn outcome_ranges(data: &PreferenceDataset) -> Vec<f64> {
    let mut lo = vec![f64::INFINITY; data.k];
    let mut hi = vec![f64::NEG_INFINITY; data.k];
    for c in &data.comparisons {
        for y in [&c.y1, &c.y2] {
            for i in 0..data.k {
                lo[i] = lo[i].min(y[i]);
                hi[i] = hi[i].max(y[i]);
            }
        }
    }
    lo.iter().zip(&hi).map(|(l, h)| if h > l { (h - l).max(1e-6) } else { 1.0 }).collect()
}

/// Maximizes the Laplace evidence over lengthscales and λ by multi-start
/// bounded quasi-Newton search. Lengthscales are searched in
/// `[1e-2, 1e2]·range` and λ in `[1e-3, 1e1]`; the signal variance stays at
/// its default because only its ratio to λ is identifiable.
pub fn fit_pref_hyperparams(
    data: &PreferenceDataset,
    config: &PrefFitConfig,
    warm: Option<&PrefGpHyperparams>,
) -> Result<PrefHyperFit> {
    data.validate()?;
    let k = data.k;
    if data.len() < 2 * k {
        return validation(format!("need at least {} comparisons to fit preference hyperparameters", 2 * k));
    }
    let ranges = outcome_ranges(data);
    let defaults = PrefGpHyperparams::default_for(&ranges);
    let mut lower: Vec<f64> = ranges.iter().map(|r| (1e-2 * r).ln()).collect();
    let mut upper: Vec<f64> = ranges.iter().map(|r| (1e2 * r).ln()).collect();
    lower.push(LAMBDA_BOUNDS.0.ln());
    upper.push(LAMBDA_BOUNDS.1.ln());
    let bounds = Bounds { lower, upper };
    let unpack = |t: &[f64]| PrefGpHyperparams {
        lengthscales: t[..k].iter().map(|v| v.exp()).collect(),
        signal_variance: defaults.signal_variance,
        lambda: t[k].exp(),
    };
    let pack = |h: &PrefGpHyperparams| -> Vec<f64> {
        let mut t: Vec<f64> = h.lengthscales.iter().map(|l| l.ln()).collect();
        t.push(h.lambda.ln());
        let mut t = t;
        bounds.project(&mut t);
        t
    };
    let objective = GradObjective(|t: &[f64], grad: Option<&mut [f64]>| match PrefGp::fit(data, &unpack(t)) {
        Ok(model) => {
            if let Some(g) = grad {
                g.copy_from_slice(&model.log_evidence_grad());
            }
            model.log_evidence()
        }
        Err(_) => f64::NEG_INFINITY,
    });

    let mut starts = vec![pack(&defaults)];
    if let Some(w) = warm {
        if w.lengthscales.len() == k {
            starts.push(pack(w));
        }
    }
    starts.extend(qmc::box_points(config.n_restarts, &bounds.lower, &bounds.upper, config.seed));
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in &starts {
        let r = lbfgsb_maximize(&objective, &bounds, s, config.max_iters, 1e-5);
        if r.value.is_finite() && best.as_ref().map_or(true, |(v, _)| r.value > *v) {
            best = Some((r.value, r.x));
        }
    }
    Ok(match best {
        Some((_, t)) => PrefHyperFit { hyper: unpack(&t), fallback: false },
        None => {
            log::warn!("preference hyperparameter fit failed at every start; using defaults");
            PrefHyperFit { hyper: defaults, fallback: true }
        }
    })
}
