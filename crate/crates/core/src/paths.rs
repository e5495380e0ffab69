//! Deterministic surfaces drawn from the outcome posterior.
//!
//! `RffPath` is a random-Fourier-feature draw from the Matérn 5/2 prior,
//! conditioned on the training data by an exact pathwise update.
//! `ZetaPath` is the reparameterized surface `μ(x) + sd(x)·Z̃` with one fixed
//! standard-normal draw per output.

use crate::error::{validation, Result};
use crate::gp::OutcomeGp;
use crate::kernel::Kernel;
use crate::optim::Bounds;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const DEFAULT_N_BASIS: usize = 512;

/// A design-to-outcome map with a Jacobian, used as a query search space.
pub trait OutcomeMap: Sync {
    fn d(&self) -> usize;
    fn k(&self) -> usize;
    fn bounds(&self) -> &Bounds;
    fn eval(&self, x: &[f64]) -> Vec<f64>;
    /// Value and `k × d` Jacobian.
    fn eval_jac(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>);
}

#[derive(Clone, Debug)]
struct RffOutput {
    /// n_basis × d, in normalized input units.
    omega: DMatrix<f64>,
    phase: DVector<f64>,
    weight: DVector<f64>,
    amplitude: f64,
    /// (K + σ²I)⁻¹ (y − m − f_prior(X) − ε), standardized units.
    update: DVector<f64>,
    mean: f64,
    y_mean: f64,
    y_std: f64,
}

#[derive(Clone, Debug)]
pub struct RffPath {
    bounds: Bounds,
    x_n: Vec<Vec<f64>>,
    kernels: Vec<crate::kernel::Matern52>,
    outputs: Vec<RffOutput>,
    n_basis: usize,
}

impl RffOutput {
    fn prior(&self, xn: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.weight.len() {
            let mut a = self.phase[i];
            for (j, v) in xn.iter().enumerate() {
                a += self.omega[(i, j)] * v;
            }
            s += self.weight[i] * a.cos();
        }
        self.amplitude * s
    }
}

impl RffPath {
    /// Draws a posterior sample path from `model` using `n_basis` features.
    pub fn draw(model: &OutcomeGp, n_basis: usize, seed: u64) -> Result<Self> {
        if n_basis == 0 {
            return validation("n_basis must be positive");
        }
        let d = model.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut outputs = Vec::with_capacity(model.k());
        let mut kernels = Vec::with_capacity(model.k());
        for g in &model.outputs {
            let ls = &g.kernel.lengthscales;
            let mut omega = DMatrix::zeros(n_basis, d);
            for i in 0..n_basis {
                // Matérn 5/2 spectral density: a multivariate t with 5 degrees of freedom.
                let chi2: f64 = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
                let scale = (5.0 / chi2).sqrt();
                for j in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    omega[(i, j)] = z * scale / ls[j];
                }
            }
            let phase = DVector::from_fn(n_basis, |_, _| rng.gen::<f64>() * std::f64::consts::TAU);
            let weight = DVector::from_fn(n_basis, |_, _| rng.sample::<f64, _>(StandardNormal));
            let amplitude = (2.0 * g.kernel.variance / n_basis as f64).sqrt();
            let mut out = RffOutput {
                omega,
                phase,
                weight,
                amplitude,
                update: DVector::zeros(0),
                mean: g.mean,
                y_mean: g.y_mean,
                y_std: g.y_std,
            };
            let n = model.x_n.len();
            let resid = DVector::from_fn(n, |i, _| {
                let eps: f64 = rng.sample(StandardNormal);
                g.y_std_train[i] - g.mean - out.prior(&model.x_n[i]) - g.noise.sqrt() * eps
            });
            let tmp = g.l.solve_lower_triangular(&resid).expect("triangular solve");
            out.update = g.l.tr_solve_lower_triangular(&tmp).expect("triangular solve");
            outputs.push(out);
            kernels.push(g.kernel.clone());
        }
        Ok(Self { bounds: model.bounds.clone(), x_n: model.x_n.clone(), kernels, outputs, n_basis })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    fn normalize(&self, x: &[f64]) -> Vec<f64> {
        crate::gp::normalize(&self.bounds, x)
    }
}

impl OutcomeMap for RffPath {
    fn d(&self) -> usize {
        self.bounds.dim()
    }

    fn k(&self) -> usize {
        self.outputs.len()
    }

    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let xn = self.normalize(x);
        self.outputs
            .iter()
            .zip(&self.kernels)
            .map(|(o, kern)| {
                let upd: f64 = self.x_n.iter().zip(o.update.iter()).map(|(xi, u)| kern.eval(&xn, xi) * u).sum();
                o.y_mean + o.y_std * (o.mean + o.prior(&xn) + upd)
            })
            .collect()
    }

    fn eval_jac(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let xn = self.normalize(x);
        let d = self.d();
        let k = self.k();
        let mut vals = Vec::with_capacity(k);
        let mut jac = DMatrix::zeros(k, d);
        let mut buf = vec![0.0; d];
        for (r, (o, kern)) in self.outputs.iter().zip(&self.kernels).enumerate() {
            let mut v = o.mean;
            let mut g = vec![0.0; d];
            for i in 0..o.weight.len() {
                let mut a = o.phase[i];
                for j in 0..d {
                    a += o.omega[(i, j)] * xn[j];
                }
                let (s, c) = a.sin_cos();
                v += o.amplitude * o.weight[i] * c;
                let coef = -o.amplitude * o.weight[i] * s;
                for j in 0..d {
                    g[j] += coef * o.omega[(i, j)];
                }
            }
            for (xi, u) in self.x_n.iter().zip(o.update.iter()) {
                v += kern.eval(&xn, xi) * u;
                kern.grad_a(&xn, xi, &mut buf);
                for j in 0..d {
                    g[j] += buf[j] * u;
                }
            }
            vals.push(o.y_mean + o.y_std * v);
            for j in 0..d {
                let range = self.bounds.upper[j] - self.bounds.lower[j];
                jac[(r, j)] = if range > 0.0 { o.y_std * g[j] / range } else { 0.0 };
            }
        }
        (vals, jac)
    }
}

/// `ζ(x) = μ(x) + sd(x)·Z̃`, applied independently per output.
#[derive(Clone, Debug)]
pub struct ZetaPath<'a> {
    model: &'a OutcomeGp,
    z: Vec<f64>,
}

/// Below this posterior variance the sd term's gradient is treated as zero.
const VAR_GRAD_FLOOR: f64 = 1e-12;

impl<'a> ZetaPath<'a> {
    pub fn new(model: &'a OutcomeGp, z: Vec<f64>) -> Result<Self> {
        if z.len() != model.k() || z.iter().any(|v| !v.is_finite()) {
            return validation("base sample must be finite with one entry per output");
        }
        Ok(Self { model, z })
    }

    /// Draws Z̃ from a seeded standard-normal stream.
    pub fn draw(model: &'a OutcomeGp, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = (0..model.k()).map(|_| rng.sample(StandardNormal)).collect();
        Self { model, z }
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }
}

impl OutcomeMap for ZetaPath<'_> {
    fn d(&self) -> usize {
        self.model.d()
    }

    fn k(&self) -> usize {
        self.model.k()
    }

    fn bounds(&self) -> &Bounds {
        self.model.bounds()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let (m, v) = self.model.predict(x);
        m.iter().zip(&v).zip(&self.z).map(|((m, v), z)| m + v.sqrt() * z).collect()
    }

    fn eval_jac(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let p = self.model.predict_with_grad(x);
        let (k, d) = (self.k(), self.d());
        let mut jac = DMatrix::zeros(k, d);
        let mut vals = Vec::with_capacity(k);
        for o in 0..k {
            let sd = p.var[o].sqrt();
            vals.push(p.mean[o] + sd * self.z[o]);
            for j in 0..d {
                let dsd = if p.var[o] > VAR_GRAD_FLOOR { p.dvar[o][j] / (2.0 * sd) } else { 0.0 };
                jac[(o, j)] = p.dmean[o][j] + self.z[o] * dsd;
            }
        }
        (vals, jac)
    }
}

/// The posterior mean surface `μ_n^f`.
#[derive(Clone, Copy, Debug)]
pub struct MeanPath<'a>(pub &'a OutcomeGp);

impl OutcomeMap for MeanPath<'_> {
    fn d(&self) -> usize {
        self.0.d()
    }

    fn k(&self) -> usize {
        self.0.k()
    }

    fn bounds(&self) -> &Bounds {
        self.0.bounds()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.0.predict(x).0
    }

    fn eval_jac(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let p = self.0.predict_with_grad(x);
        let jac = DMatrix::from_fn(self.k(), self.d(), |o, j| p.dmean[o][j]);
        (p.mean, jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{ExperimentDataset, FitConfig, NoiseSetting};

    fn toy_model(noise: f64) -> OutcomeGp {
        let bounds = Bounds::new(vec![0.0, -1.0], vec![2.0, 1.0]).unwrap();
        let mut data = ExperimentDataset::new(bounds.clone(), 2);
        for p in crate::qmc::box_points(10, &bounds.lower, &bounds.upper, 3) {
            let y = vec![(p[0] * 1.3).sin() + p[1], p[0] * p[1] - 0.5 * p[1] * p[1]];
            data.push(p, y).unwrap();
        }
        let config = FitConfig { noise: NoiseSetting::Fixed(noise), ..FitConfig::default() };
        OutcomeGp::fit(&data, &config).unwrap()
    }

    fn fd_jacobian(map: &dyn OutcomeMap, x: &[f64]) -> DMatrix<f64> {
        let h = 1e-6;
        let mut j = DMatrix::zeros(map.k(), map.d());
        for c in 0..map.d() {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[c] += h;
            b[c] -= h;
            let (fa, fb) = (map.eval(&a), map.eval(&b));
            for o in 0..map.k() {
                j[(o, c)] = (fa[o] - fb[o]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn rff_is_deterministic_and_jacobian_matches() {
        let model = toy_model(1e-6);
        let path = RffPath::draw(&model, 256, 11).unwrap();
        let x = [0.7, 0.2];
        assert_eq!(path.eval(&x), path.eval(&x));
        let again = RffPath::draw(&model, 256, 11).unwrap();
        assert_eq!(path.eval(&x), again.eval(&x));
        let (v, jac) = path.eval_jac(&x);
        assert!(v.iter().zip(path.eval(&x)).all(|(a, b)| (a - b).abs() < 1e-10));
        let fd = fd_jacobian(&path, &x);
        assert!((jac - fd).abs().max() < 1e-5);
    }

    #[test]
    fn zeta_at_training_inputs_returns_observations() {
        let model = toy_model(0.0);
        let pts = crate::qmc::box_points(10, &[0.0, -1.0], &[2.0, 1.0], 3);
        let path = ZetaPath::new(&model, vec![2.5, -1.7]).unwrap();
        for p in &pts {
            let y = [(p[0] * 1.3).sin() + p[1], p[0] * p[1] - 0.5 * p[1] * p[1]];
            let z = path.eval(p);
            assert!((z[0] - y[0]).abs() < 1e-6 && (z[1] - y[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn zeta_zero_is_mean_and_symmetric() {
        let model = toy_model(1e-6);
        let x = [1.1, 0.3];
        let zero = ZetaPath::new(&model, vec![0.0, 0.0]).unwrap();
        assert_eq!(zero.eval(&x), model.predict(&x).0);
        let a = ZetaPath::new(&model, vec![0.8, -0.4]).unwrap().eval(&x);
        let b = ZetaPath::new(&model, vec![-0.8, 0.4]).unwrap().eval(&x);
        let m = model.predict(&x).0;
        for o in 0..2 {
            assert!((a[o] + b[o] - 2.0 * m[o]).abs() < 1e-12);
        }
        let path = ZetaPath::new(&model, vec![0.8, -0.4]).unwrap();
        let (_, jac) = path.eval_jac(&x);
        let fd = fd_jacobian(&path, &x);
        assert!((&jac - &fd).abs().max() < 1e-4);
    }
}
