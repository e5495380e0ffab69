//! Independent dense oracles and random model builders shared by the
//! integration suites. Nothing here calls the library's own linear algebra
//! or likelihood code.
#![allow(dead_code)]

use bope_core::pref::{PrefGp, PrefGpHyperparams, PreferenceDataset, Query, Response};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::SQRT_2;

/// Gauss–Hermite rule for `E[h(Z)]`, `Z ~ N(0, 1)` (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut rule: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule.into_iter().unzip()
}

/// Standard normal CDF by Simpson integration of the density from −12, for
/// oracles that must not share the library's implementation.
pub fn phi_cdf_oracle(x: f64) -> f64 {
    if x < -12.0 {
        return 0.0;
    }
    let n = 20_000;
    let (a, b) = (-12.0, x);
    let h = (b - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(a + i as f64 * h);
    }
    s * h / 3.0
}

pub fn matern52(a: &[f64], b: &[f64], ls: &[f64], var: f64) -> f64 {
    let r = a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum::<f64>().sqrt();
    let s5 = 5f64.sqrt();
    var * (1.0 + s5 * r + 5.0 * r * r / 3.0) * (-s5 * r).exp()
}

pub fn rbf(a: &[f64], b: &[f64], ls: &[f64], var: f64) -> f64 {
    var * (-0.5 * a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum::<f64>()).exp()
}

/// Conditional Gaussian `p(f(test) | y)` by explicit inversion.
pub fn dense_gp_posterior(
    kern: &dyn Fn(&[f64], &[f64]) -> f64,
    x: &[Vec<f64>],
    y: &[f64],
    noise: f64,
    mean: f64,
    test: &[Vec<f64>],
) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| kern(&x[i], &x[j]) + if i == j { noise } else { 0.0 });
    let kinv = k.try_inverse().expect("invertible Gram matrix");
    let ks = DMatrix::from_fn(n, test.len(), |i, j| kern(&x[i], &test[j]));
    let kss = DMatrix::from_fn(test.len(), test.len(), |i, j| kern(&test[i], &test[j]));
    let r = DVector::from_iterator(n, y.iter().map(|v| v - mean));
    let mu = ks.transpose() * &kinv * r;
    let cov = kss - ks.transpose() * &kinv * &ks;
    (mu.add_scalar(mean), cov)
}

/// Distinct outcomes and (winner, loser) index pairs of a dataset.
pub fn distinct_pairs(data: &PreferenceDataset) -> (Vec<Vec<f64>>, Vec<(usize, usize)>) {
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let idx = |y: &[f64], pts: &mut Vec<Vec<f64>>| {
        pts.iter().position(|p| p.as_slice() == y).unwrap_or_else(|| {
            pts.push(y.to_vec());
            pts.len() - 1
        })
    };
    let pairs = data
        .comparisons
        .iter()
        .map(|c| {
            let w = idx(c.winner(), &mut pts);
            let l = idx(c.loser(), &mut pts);
            (w, l)
        })
        .collect();
    (pts, pairs)
}

/// Dense Laplace oracle: maximizes the exact unnormalized log posterior
/// `Σ log Φ((f_w − f_l)/√2λ) − ½ fᵀK⁻¹f` by damped Newton with
/// finite-difference derivatives, then returns the mode and `(K⁻¹ + W)⁻¹`
/// with `W` the finite-difference Hessian of the negative log-likelihood.
pub fn dense_laplace(
    pts: &[Vec<f64>],
    pairs: &[(usize, usize)],
    ls: &[f64],
    var: f64,
    lambda: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let m = pts.len();
    let k = DMatrix::from_fn(m, m, |i, j| rbf(&pts[i], &pts[j], ls, var));
    let kinv = k.try_inverse().expect("invertible prior covariance");
    let log_phi = |z: f64| phi_cdf_oracle(z).ln();
    let loglik = |f: &DVector<f64>| -> f64 {
        pairs.iter().map(|&(w, l)| log_phi((f[w] - f[l]) / (SQRT_2 * lambda))).sum()
    };
    let psi = |f: &DVector<f64>| loglik(f) - 0.5 * f.dot(&(&kinv * f));
    let h = 1e-4;
    let fd_grad = |func: &dyn Fn(&DVector<f64>) -> f64, f: &DVector<f64>| {
        DVector::from_fn(m, |i, _| {
            let mut a = f.clone();
            let mut b = f.clone();
            a[i] += h;
            b[i] -= h;
            (func(&a) - func(&b)) / (2.0 * h)
        })
    };
    let fd_hess = |func: &dyn Fn(&DVector<f64>) -> f64, f: &DVector<f64>| {
        let mut hm = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let e = |di: f64, dj: f64| {
                    let mut a = f.clone();
                    a[i] += di;
                    a[j] += dj;
                    func(&a)
                };
                hm[(i, j)] = (e(h, h) - e(h, -h) - e(-h, h) + e(-h, -h)) / (4.0 * h * h);
            }
        }
        (&hm + hm.transpose()) * 0.5
    };
    let mut f = DVector::zeros(m);
    for _ in 0..100 {
        let g = fd_grad(&loglik, &f) - &kinv * &f;
        if g.amax() < 1e-10 {
            break;
        }
        let w = -fd_hess(&loglik, &f);
        let step = (&kinv + w).try_inverse().expect("invertible curvature") * g;
        let mut t = 1.0;
        let base = psi(&f);
        while psi(&(&f + &step * t)) < base && t > 1e-8 {
            t *= 0.5;
        }
        f += step * t;
    }
    let w = -fd_hess(&loglik, &f);
    let cov = (&kinv + w).try_inverse().expect("invertible curvature");
    (f, cov)
}

/// Random preference model on `[0, 1]^k`: `n_points` outcomes, `n_cmp`
/// comparisons answered by a random linear utility with 10% flips.
pub fn random_pref_model(rng: &mut ChaCha8Rng, k: usize, n_points: usize, n_cmp: usize) -> (PreferenceDataset, PrefGp) {
    let pts: Vec<Vec<f64>> = (0..n_points).map(|_| (0..k).map(|_| rng.gen::<f64>()).collect()).collect();
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let u = |y: &[f64]| y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let mut data = PreferenceDataset::new(k);
    for _ in 0..n_cmp {
        let i = rng.gen_range(0..n_points);
        let mut j = rng.gen_range(0..n_points - 1);
        if j >= i {
            j += 1;
        }
        let first = (u(&pts[i]) > u(&pts[j])) != (rng.gen::<f64>() < 0.1);
        let r = if first { Response::First } else { Response::Second };
        data.push(&Query::new(pts[i].clone(), pts[j].clone()).unwrap(), r).unwrap();
    }
    let hyper = PrefGpHyperparams {
        lengthscales: (0..k).map(|_| rng.gen_range(0.2..0.8)).collect(),
        signal_variance: rng.gen_range(0.5..2.0),
        lambda: rng.gen_range(0.05..0.5),
    };
    let model = PrefGp::fit(&data, &hyper).unwrap();
    (data, model)
}

/// Uniform random points in `[0, 1]^k`.
pub fn random_points(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..k).map(|_| rng.gen::<f64>()).collect()).collect()
}
