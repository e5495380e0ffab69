//! Stationary ARD kernels with input and log-hyperparameter gradients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

const SQRT5: f64 = 2.236_067_977_499_79;

pub trait Kernel: Send + Sync {
    fn dim(&self) -> usize;
    fn variance(&self) -> f64;
    fn eval(&self, a: &[f64], b: &[f64]) -> f64;
    /// Writes ∂k(a, b)/∂a into `out`.
    fn grad_a(&self, a: &[f64], b: &[f64], out: &mut [f64]);
    /// Writes ∂k/∂log(ℓᵢ) for every dimension, followed by ∂k/∂log(s²).
    fn grad_log_hyper(&self, a: &[f64], b: &[f64], out: &mut [f64]);

    fn n_hyper(&self) -> usize {
        self.dim() + 1
    }

    fn gram(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.eval(&xs[i], &xs[i]);
            for j in 0..i {
                let v = self.eval(&xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn cross(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(&a[i], &b[j]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matern52 {
    pub lengthscales: Vec<f64>,
    pub variance: f64,
}

impl Matern52 {
    pub fn new(lengthscales: Vec<f64>, variance: f64) -> Self {
        Self { lengthscales, variance }
    }

    fn scaled_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// −(1/r)·∂k/∂r, finite at r = 0.
    fn radial_factor(&self, r: f64) -> f64 {
        self.variance * (5.0 / 3.0) * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp()
    }
}

impl Kernel for Matern52 {
    fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn variance(&self) -> f64 {
        self.variance
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r = self.scaled_dist(a, b);
        self.variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp()
    }

    fn grad_a(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let f = self.radial_factor(self.scaled_dist(a, b));
        for i in 0..a.len() {
            let l = self.lengthscales[i];
            out[i] = -f * (a[i] - b[i]) / (l * l);
        }
    }

    fn grad_log_hyper(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let r = self.scaled_dist(a, b);
        let f = self.radial_factor(r);
        let d = a.len();
        for i in 0..d {
            let l = self.lengthscales[i];
            out[i] = f * (a[i] - b[i]).powi(2) / (l * l);
        }
        out[d] = self.variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rbf {
    pub lengthscales: Vec<f64>,
    pub variance: f64,
}

impl Rbf {
    pub fn new(lengthscales: Vec<f64>, variance: f64) -> Self {
        Self { lengthscales, variance }
    }
}

impl Kernel for Rbf {
    fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn variance(&self) -> f64 {
        self.variance
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        self.variance * (-0.5 * r2).exp()
    }

    fn grad_a(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let k = self.eval(a, b);
        for i in 0..a.len() {
            let l = self.lengthscales[i];
            out[i] = -k * (a[i] - b[i]) / (l * l);
        }
    }

    fn grad_log_hyper(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let k = self.eval(a, b);
        let d = a.len();
        for i in 0..d {
            let l = self.lengthscales[i];
            out[i] = k * (a[i] - b[i]).powi(2) / (l * l);
        }
        out[d] = k;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_grads(k: &dyn Kernel, lengthscales: &[f64], variance: f64, rebuild: &dyn Fn(Vec<f64>, f64) -> Box<dyn Kernel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = k.dim();
        let h = 1e-5;
        for _ in 0..20 {
            let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = vec![0.0; d];
            k.grad_a(&a, &b, &mut g);
            for i in 0..d {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[i] += h;
                am[i] -= h;
                let fd = (k.eval(&ap, &b) - k.eval(&am, &b)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "input grad {i}: {fd} vs {}", g[i]);
            }
            let mut gh = vec![0.0; d + 1];
            k.grad_log_hyper(&a, &b, &mut gh);
            for i in 0..=d {
                let mut lp: Vec<f64> = lengthscales.to_vec();
                let mut lm = lp.clone();
                let (mut vp, mut vm) = (variance, variance);
                if i < d {
                    lp[i] *= h.exp();
                    lm[i] *= (-h).exp();
                } else {
                    vp *= h.exp();
                    vm *= (-h).exp();
                }
                let fd = (rebuild(lp, vp).eval(&a, &b) - rebuild(lm, vm).eval(&a, &b)) / (2.0 * h);
                assert!((fd - gh[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "hyper grad {i}: {fd} vs {}", gh[i]);
            }
        }
    }

    #[test]
    fn matern_gradients_match_finite_differences() {
        let ls = vec![0.3, 0.7, 1.3];
        let k = Matern52::new(ls.clone(), 1.7);
        check_grads(&k, &ls, 1.7, &|l, v| Box::new(Matern52::new(l, v)));
    }

    #[test]
    fn rbf_gradients_match_finite_differences() {
        let ls = vec![0.5, 2.0];
        let k = Rbf::new(ls.clone(), 0.8);
        check_grads(&k, &ls, 0.8, &|l, v| Box::new(Rbf::new(l, v)));
    }

    #[test]
    fn kernel_at_zero_distance_is_variance() {
        let k = Matern52::new(vec![0.2], 2.5);
        assert!((k.eval(&[0.3], &[0.3]) - 2.5).abs() < 1e-15);
        let mut g = [1.0];
        k.grad_a(&[0.3], &[0.3], &mut g);
        assert_eq!(g[0], 0.0);
    }
}
