//! Outcome surrogate: one exact GP per output with a Matérn 5/2 ARD kernel.
//!
//! Inputs are mapped to the unit cube and each output is standardized before
//! fitting. Everything returned through the public API is in original units.

use crate::error::{validation, BopeError, Result};
use crate::kernel::{Kernel, Matern52};
use crate::linalg::{cholesky_jittered, log_det_chol, symmetrize};
use crate::optim::{lbfgsb_maximize, Bounds, GradObjective};
use crate::qmc;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Designs with observed outcome vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDataset {
    pub d: usize,
    pub k: usize,
    pub bounds: Bounds,
    pub records: Vec<Record>,
}

impl ExperimentDataset {
    pub fn new(bounds: Bounds, k: usize) -> Self {
        Self { d: bounds.dim(), k, bounds, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, y: Vec<f64>) -> Result<()> {
        self.check_record(&x, &y)?;
        self.records.push(Record { x, y });
        Ok(())
    }

    fn check_record(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.d || y.len() != self.k {
            return validation(format!(
                "record shape ({}, {}) does not match dataset ({}, {})",
                x.len(),
                y.len(),
                self.d,
                self.k
            ));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return validation("non-finite value in record");
        }
        if !self.bounds.contains(x) {
            return validation("design point outside its box bounds");
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 {
            return validation("d and k must be positive");
        }
        if self.bounds.dim() != self.d {
            return validation("bounds dimension does not match d");
        }
        for r in &self.records {
            self.check_record(&r.x, &r.y)?;
        }
        Ok(())
    }

    pub fn designs(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.x.clone()).collect()
    }

    pub fn outcomes(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.y.clone()).collect()
    }

    fn has_duplicate_designs(&self) -> bool {
        for i in 0..self.records.len() {
            for j in 0..i {
                if self.records[i].x == self.records[j].x {
                    return true;
                }
            }
        }
        false
    }
}

/// Mean vector and covariance matrix over a finite set of points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0))
    }
}

/// Per-output hyperparameters in original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeGpHyperparams {
    pub lengthscales: Vec<Vec<f64>>,
    pub signal_variance: Vec<f64>,
    pub noise_variance: Vec<f64>,
    pub mean: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum NoiseSetting {
    /// Observation noise variance in standardized output units.
    Fixed(f64),
    Fitted,
}

pub const NOISE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub noise: NoiseSetting,
    pub n_restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { noise: NoiseSetting::Fixed(NOISE_FLOOR), n_restarts: 8, max_iters: 200, seed: 0 }
    }
}

// log-space search box, in normalized / standardized units
const LOG_LS: (f64, f64) = (-4.605_170_185_988_091, 4.605_170_185_988_091); // [1e-2, 1e2]
const LOG_SV: (f64, f64) = (-6.907_755_278_982_137, 6.907_755_278_982_137); // [1e-3, 1e3]
const LOG_NOISE: (f64, f64) = (-13.815_510_557_964_274, -2.302_585_092_994_045_7); // [1e-6, 1e-1]
const MEAN_BOX: (f64, f64) = (-3.0, 3.0);

/// Log marginal likelihood and its gradient with respect to
/// `[log ℓ₁..log ℓ_d, log s², mean, log σ²]`.
#[derive(Clone, Debug)]
pub struct Lml {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Exact GP log marginal likelihood with a constant mean, in whatever units the inputs are given.
pub fn log_marginal_likelihood(
    x: &[Vec<f64>],
    y: &[f64],
    kernel: &Matern52,
    noise: f64,
    mean: f64,
) -> Result<Lml> {
    let n = x.len();
    let d = kernel.dim();
    let mut k = kernel.gram(x);
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let (chol, _) = cholesky_jittered(&k)
        .ok_or_else(|| BopeError::Numerical("kernel matrix is not positive definite".into()))?;
    let r = DVector::from_iterator(n, y.iter().map(|v| v - mean));
    let alpha = chol.solve(&r);
    let value = -0.5 * r.dot(&alpha) - 0.5 * log_det_chol(&chol) - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let kinv = chol.inverse();
    let a = &alpha * alpha.transpose() - &kinv;
    let mut grad = vec![0.0; d + 3];
    let mut buf = vec![0.0; d + 1];
    for i in 0..n {
        for j in 0..=i {
            kernel.grad_log_hyper(&x[i], &x[j], &mut buf);
            let w = if i == j { 0.5 * a[(i, i)] } else { a[(i, j)] };
            for p in 0..=d {
                grad[p] += w * buf[p];
            }
        }
    }
    grad[d + 1] = alpha.sum();
    grad[d + 2] = 0.5 * noise * a.trace();
    Ok(Lml { value, grad })
}

#[derive(Clone, Debug)]
pub(crate) struct SingleGp {
    pub kernel: Matern52,
    pub noise: f64,
    pub mean: f64,
    pub y_mean: f64,
    pub y_std: f64,
    /// Lower Cholesky factor of K + σ²I (+ jitter).
    pub l: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub y_std_train: DVector<f64>,
}

impl SingleGp {
    fn build(x: &[Vec<f64>], y_s: &[f64], kernel: Matern52, noise: f64, mean: f64, y_mean: f64, y_std: f64, output: usize) -> Result<Self> {
        let n = x.len();
        let mut k = kernel.gram(x);
        for i in 0..n {
            k[(i, i)] += noise;
        }
        let (chol, _) = cholesky_jittered(&k).ok_or_else(|| {
            BopeError::Numerical(format!("Cholesky failed for output {output} after jitter escalation"))
        })?;
        let ys = DVector::from_column_slice(y_s);
        let r = ys.add_scalar(-mean);
        let alpha = chol.solve(&r);
        Ok(Self { kernel, noise, mean, y_mean, y_std, l: chol.l(), alpha, y_std_train: ys })
    }
}

/// Fitted multi-output outcome model (independent outputs).
#[derive(Clone, Debug)]
pub struct OutcomeGp {
    pub(crate) bounds: Bounds,
    pub(crate) k: usize,
    /// Training inputs mapped to the unit cube.
    pub(crate) x_n: Vec<Vec<f64>>,
    pub(crate) outputs: Vec<SingleGp>,
}

fn standardize(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    let s = var.sqrt();
    (m, if s > 1e-12 * (1.0 + m.abs()) { s } else { 1.0 })
}

impl OutcomeGp {
    pub fn fit(data: &ExperimentDataset, config: &FitConfig) -> Result<Self> {
        Self::fit_warm(data, config, None)
    }

    /// Fits hyperparameters by multi-start maximization of the log marginal
    /// likelihood; `warm` adds a start at previously fitted hyperparameters.
    pub fn fit_warm(data: &ExperimentDataset, config: &FitConfig, warm: Option<&OutcomeGpHyperparams>) -> Result<Self> {
        data.validate()?;
        if data.len() < 2 {
            return validation("outcome GP needs at least 2 records");
        }
        if let NoiseSetting::Fixed(v) = config.noise {
            if !(v >= 0.0 && v.is_finite()) {
                return validation("noise variance must be finite and non-negative");
            }
            if v == 0.0 && data.has_duplicate_designs() {
                return validation("duplicate designs require observation noise");
            }
        }
        let d = data.d;
        let x_n: Vec<Vec<f64>> = data.records.iter().map(|r| normalize(&data.bounds, &r.x)).collect();
        let mut outputs = Vec::with_capacity(data.k);
        for o in 0..data.k {
            let y: Vec<f64> = data.records.iter().map(|r| r.y[o]).collect();
            let (y_mean, y_std) = standardize(&y);
            let y_s: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
            let warm_theta = warm.and_then(|h| {
                (h.lengthscales.len() == data.k).then(|| {
                    let mut t: Vec<f64> = h.lengthscales[o]
                        .iter()
                        .zip(data.bounds.lower.iter().zip(&data.bounds.upper))
                        .map(|(l, (lo, hi))| (l / (hi - lo)).ln().clamp(LOG_LS.0, LOG_LS.1))
                        .collect();
                    t.push((h.signal_variance[o] / (y_std * y_std)).ln().clamp(LOG_SV.0, LOG_SV.1));
                    t.push(((h.mean[o] - y_mean) / y_std).clamp(MEAN_BOX.0, MEAN_BOX.1));
                    t.push((h.noise_variance[o] / (y_std * y_std)).max(1e-6).ln().clamp(LOG_NOISE.0, LOG_NOISE.1));
                    t
                })
            });
            let (kernel, noise, mean) = fit_single(&x_n, &y_s, d, config, o, warm_theta)?;
            outputs.push(SingleGp::build(&x_n, &y_s, kernel, noise, mean, y_mean, y_std, o)?);
        }
        Ok(Self { bounds: data.bounds.clone(), k: data.k, x_n, outputs })
    }

    /// Rebuilds a model from data and previously fitted hyperparameters, without refitting.
    pub fn from_hyperparams(data: &ExperimentDataset, hyper: &OutcomeGpHyperparams) -> Result<Self> {
        data.validate()?;
        if data.len() < 1 || hyper.lengthscales.len() != data.k {
            return validation("hyperparameters do not match dataset");
        }
        let x_n: Vec<Vec<f64>> = data.records.iter().map(|r| normalize(&data.bounds, &r.x)).collect();
        let mut outputs = Vec::with_capacity(data.k);
        for o in 0..data.k {
            let y: Vec<f64> = data.records.iter().map(|r| r.y[o]).collect();
            let (y_mean, y_std) = standardize(&y);
            let y_s: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
            let ls = hyper.lengthscales[o]
                .iter()
                .zip(data.bounds.lower.iter().zip(&data.bounds.upper))
                .map(|(l, (lo, hi))| l / (hi - lo))
                .collect();
            let kernel = Matern52::new(ls, hyper.signal_variance[o] / (y_std * y_std));
            let noise = hyper.noise_variance[o] / (y_std * y_std);
            let mean = (hyper.mean[o] - y_mean) / y_std;
            outputs.push(SingleGp::build(&x_n, &y_s, kernel, noise, mean, y_mean, y_std, o)?);
        }
        Ok(Self { bounds: data.bounds.clone(), k: data.k, x_n, outputs })
    }

    pub fn d(&self) -> usize {
        self.bounds.dim()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn n_train(&self) -> usize {
        self.x_n.len()
    }

    pub fn hyperparams(&self) -> OutcomeGpHyperparams {
        let ranges: Vec<f64> = self.bounds.lower.iter().zip(&self.bounds.upper).map(|(l, u)| u - l).collect();
        OutcomeGpHyperparams {
            lengthscales: self
                .outputs
                .iter()
                .map(|g| g.kernel.lengthscales.iter().zip(&ranges).map(|(l, r)| l * r).collect())
                .collect(),
            signal_variance: self.outputs.iter().map(|g| g.kernel.variance * g.y_std * g.y_std).collect(),
            noise_variance: self.outputs.iter().map(|g| g.noise * g.y_std * g.y_std).collect(),
            mean: self.outputs.iter().map(|g| g.y_mean + g.mean * g.y_std).collect(),
        }
    }

    /// Log marginal likelihood per output (standardized units) with gradients.
    pub fn log_marginal_likelihood(&self) -> Result<Vec<Lml>> {
        self.outputs
            .iter()
            .map(|g| log_marginal_likelihood(&self.x_n, g.y_std_train.as_slice(), &g.kernel, g.noise, g.mean))
            .collect()
    }

    pub(crate) fn normalize(&self, x: &[f64]) -> Vec<f64> {
        normalize(&self.bounds, x)
    }

    fn check_points(&self, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if points.is_empty() {
            return validation("no query points");
        }
        if points.iter().any(|p| p.len() != self.d()) {
            return validation(format!("query points must have dimension {}", self.d()));
        }
        Ok(points.iter().map(|p| self.normalize(p)).collect())
    }

    /// Whitened cross-covariance `L⁻¹ K(X_train, points)` for one output (normalized inputs).
    pub(crate) fn whitened_cross(&self, o: usize, pts_n: &[Vec<f64>]) -> DMatrix<f64> {
        let g = &self.outputs[o];
        let ks = g.kernel.cross(&self.x_n, pts_n);
        g.l.solve_lower_triangular(&ks).expect("triangular solve")
    }

    /// Posterior mean (original units) at normalized points, given the whitened cross block.
    pub(crate) fn mean_from_cross(&self, o: usize, pts_n: &[Vec<f64>]) -> DVector<f64> {
        let g = &self.outputs[o];
        let ks = g.kernel.cross(&self.x_n, pts_n);
        let m = ks.tr_mul(&g.alpha).add_scalar(g.mean);
        m.map(|v| g.y_mean + g.y_std * v)
    }

    /// Posterior covariance (original units) between two sets of normalized points,
    /// using their whitened cross blocks.
    pub(crate) fn cov_from_cross(&self, o: usize, a_n: &[Vec<f64>], va: &DMatrix<f64>, b_n: &[Vec<f64>], vb: &DMatrix<f64>) -> DMatrix<f64> {
        let g = &self.outputs[o];
        let prior = g.kernel.cross(a_n, b_n);
        (prior - va.tr_mul(vb)) * (g.y_std * g.y_std)
    }

    /// Prior variance of one output in original units.
    pub(crate) fn prior_variance(&self, o: usize) -> f64 {
        let g = &self.outputs[o];
        let z = vec![0.0; self.bounds.dim()];
        g.kernel.eval(&z, &z) * g.y_std * g.y_std
    }

    /// Exact joint posterior for each output at `points`.
    pub fn posterior(&self, points: &[Vec<f64>]) -> Result<Vec<GaussianPosterior>> {
        let pts_n = self.check_points(points)?;
        Ok((0..self.k)
            .map(|o| {
                let v = self.whitened_cross(o, &pts_n);
                let cov = symmetrize(&self.cov_from_cross(o, &pts_n, &v, &pts_n, &v));
                GaussianPosterior { mean: self.mean_from_cross(o, &pts_n), cov }
            })
            .collect())
    }

    /// Marginal posterior mean and variance of every output at one point.
    pub fn predict(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xn = self.normalize(x);
        let mut means = Vec::with_capacity(self.k);
        let mut vars = Vec::with_capacity(self.k);
        for g in &self.outputs {
            let ks = DVector::from_iterator(self.x_n.len(), self.x_n.iter().map(|xi| g.kernel.eval(&xn, xi)));
            let m = ks.dot(&g.alpha) + g.mean;
            let v = g.l.solve_lower_triangular(&ks).expect("triangular solve");
            let var = (g.kernel.variance - v.norm_squared()).max(0.0);
            means.push(g.y_mean + g.y_std * m);
            vars.push(var * g.y_std * g.y_std);
        }
        (means, vars)
    }

    /// Like `predict`, also returning ∂mean/∂x and ∂var/∂x (per output, original units).
    pub fn predict_with_grad(&self, x: &[f64]) -> MarginalWithGrad {
        let xn = self.normalize(x);
        let d = self.d();
        let n = self.x_n.len();
        let ranges: Vec<f64> = self.bounds.lower.iter().zip(&self.bounds.upper).map(|(l, u)| u - l).collect();
        let mut out = MarginalWithGrad {
            mean: Vec::with_capacity(self.k),
            var: Vec::with_capacity(self.k),
            dmean: Vec::with_capacity(self.k),
            dvar: Vec::with_capacity(self.k),
        };
        let mut buf = vec![0.0; d];
        for g in &self.outputs {
            let ks = DVector::from_iterator(n, self.x_n.iter().map(|xi| g.kernel.eval(&xn, xi)));
            let mut dk = DMatrix::zeros(n, d);
            for (i, xi) in self.x_n.iter().enumerate() {
                g.kernel.grad_a(&xn, xi, &mut buf);
                for j in 0..d {
                    dk[(i, j)] = buf[j];
                }
            }
            let m = ks.dot(&g.alpha) + g.mean;
            let v = g.l.solve_lower_triangular(&ks).expect("triangular solve");
            let w = g.l.tr_solve_lower_triangular(&v).expect("triangular solve");
            let var = (g.kernel.variance - v.norm_squared()).max(0.0);
            let dm = dk.tr_mul(&g.alpha);
            let dv = dk.tr_mul(&w) * -2.0;
            let s2 = g.y_std * g.y_std;
            out.mean.push(g.y_mean + g.y_std * m);
            out.var.push(var * s2);
            out.dmean.push((0..d).map(|j| g.y_std * dm[j] / ranges[j]).collect());
            out.dvar.push((0..d).map(|j| if var > 0.0 { s2 * dv[j] / ranges[j] } else { 0.0 }).collect());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct MarginalWithGrad {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub dmean: Vec<Vec<f64>>,
    pub dvar: Vec<Vec<f64>>,
}

pub(crate) fn normalize(bounds: &Bounds, x: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(v, (l, u))| if u > l { (v - l) / (u - l) } else { 0.0 })
        .collect()
}

fn fit_single(
    x: &[Vec<f64>],
    y: &[f64],
    d: usize,
    config: &FitConfig,
    output: usize,
    warm: Option<Vec<f64>>,
) -> Result<(Matern52, f64, f64)> {
    let fit_noise = matches!(config.noise, NoiseSetting::Fitted);
    let n_par = d + 2 + usize::from(fit_noise);
    let mut lower = vec![LOG_LS.0; d];
    let mut upper = vec![LOG_LS.1; d];
    lower.extend([LOG_SV.0, MEAN_BOX.0]);
    upper.extend([LOG_SV.1, MEAN_BOX.1]);
    if fit_noise {
        lower.push(LOG_NOISE.0);
        upper.push(LOG_NOISE.1);
    }
    let bounds = Bounds { lower, upper };
    let unpack = |t: &[f64]| -> (Matern52, f64, f64) {
        let kernel = Matern52::new(t[..d].iter().map(|v| v.exp()).collect(), t[d].exp());
        let noise = match config.noise {
            NoiseSetting::Fixed(v) => v,
            NoiseSetting::Fitted => t[d + 2].exp(),
        };
        (kernel, noise, t[d + 1])
    };
    let objective = GradObjective(|t: &[f64], grad: Option<&mut [f64]>| {
        let (kernel, noise, mean) = unpack(t);
        match log_marginal_likelihood(x, y, &kernel, noise, mean) {
            Ok(l) => {
                if let Some(g) = grad {
                    g[..d + 2].copy_from_slice(&l.grad[..d + 2]);
                    if fit_noise {
                        g[d + 2] = l.grad[d + 2];
                    }
                }
                l.value
            }
            Err(_) => f64::NEG_INFINITY,
        }
    });

    // first start at a sensible default, then quasi-random starts in the box
    let mut starts = vec![{
        let mut t = vec![(0.5f64).ln(); d];
        t.extend([0.0, 0.0]);
        if fit_noise {
            t.push((1e-4f64).ln());
        }
        t
    }];
    if let Some(w) = warm {
        let mut w = w;
        w.truncate(n_par);
        starts.push(w);
    }
    let seed = qmc::derive_seed(config.seed, output as u64);
    starts.extend(qmc::box_points(config.n_restarts.saturating_sub(1), &bounds.lower, &bounds.upper, seed));

    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in &starts {
        let r = lbfgsb_maximize(&objective, &bounds, s, config.max_iters, 1e-6);
        if r.value.is_finite() && best.as_ref().map_or(true, |(v, _)| r.value > *v) {
            best = Some((r.value, r.x));
        }
    }
    let (_, theta) = best.ok_or_else(|| {
        BopeError::Numerical(format!("Cholesky failed for output {output} at every hyperparameter start"))
    })?;
    Ok(unpack(&theta))
}
