//! Bounded multi-start quasi-Newton maximization.
//!
//! The local solver is a projected limited-memory BFGS: search directions come
//! from the two-loop recursion restricted to the free variables, steps are
//! projected onto the box, and an Armijo backtracking line search accepts them.

use crate::error::{validation, Result};
use crate::qmc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return validation("bounds must be non-empty and of equal length");
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return validation("bounds must be finite with lower <= upper");
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(d: usize) -> Self {
        Self { lower: vec![0.0; d], upper: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    /// Concatenates `times` copies, for optimizing over pairs or batches of points.
    pub fn repeat(&self, times: usize) -> Self {
        Self {
            lower: self.lower.repeat(times),
            upper: self.upper.repeat(times),
        }
    }
}

/// A deterministic objective to be maximized.
pub trait Objective: Sync {
    fn value(&self, x: &[f64]) -> f64;

    /// Value and gradient. Defaults to central differences.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let h = 1e-6;
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = self.value(&xp);
            xp[i] = orig - h;
            let fm = self.value(&xp);
            xp[i] = orig;
            grad[i] = (fp - fm) / (2.0 * h);
        }
        self.value(x)
    }
}

/// Wraps a value-only closure; gradients by central differences.
pub struct FnObjective<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for FnObjective<F> {
    fn value(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// Wraps a closure returning value and writing the gradient.
pub struct GradObjective<F>(pub F);

impl<F: Fn(&[f64], Option<&mut [f64]>) -> f64 + Sync> Objective for GradObjective<F> {
    fn value(&self, x: &[f64]) -> f64 {
        (self.0)(x, None)
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.0)(x, Some(grad))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub n_restarts: usize,
    pub n_raw_samples: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { n_restarts: 8, n_raw_samples: 256, max_iters: 200, grad_tol: 1e-6, seed: 0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_restarts == 0 || self.n_raw_samples == 0 || self.max_iters == 0 {
            return validation("optimizer budgets must be positive");
        }
        if self.n_restarts > self.n_raw_samples {
            return validation("n_restarts must not exceed n_raw_samples");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Every local search failed; `x` is the best raw candidate.
    pub degraded: bool,
}

#[derive(Clone, Debug)]
pub struct LocalResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub failed: bool,
}

const MEMORY: usize = 10;

/// Projected L-BFGS maximization of `obj` from `x0` inside `bounds`.
pub fn lbfgsb_maximize(
    obj: &dyn Objective,
    bounds: &Bounds,
    x0: &[f64],
    max_iters: usize,
    grad_tol: f64,
) -> LocalResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    // minimize the negated objective
    let mut f = -obj.value_grad(&x, &mut g);
    g.iter_mut().for_each(|v| *v = -*v);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return LocalResult { x, value: -f, iterations: 0, converged: false, failed: true };
    }
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut converged = false;
    let mut failed = false;
    let mut iterations = 0;
    let mut stall = 0;

    while iterations < max_iters {
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lo = x[i] <= bounds.lower[i] && g[i] > 0.0;
                let at_hi = x[i] >= bounds.upper[i] && g[i] < 0.0;
                !(at_lo || at_hi) && bounds.upper[i] > bounds.lower[i]
            })
            .collect();
        let pg_norm = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
        if pg_norm < grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut d = two_loop(&g, &free, &mem);
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            mem.clear();
            d = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        }
        let mut t = if mem.is_empty() {
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            (1.0 / dn.max(1e-12)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            bounds.project(&mut xn);
            let step: f64 = xn.iter().zip(&x).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum();
            let mut gn = vec![0.0; n];
            let fnew = -obj.value_grad(&xn, &mut gn);
            if fnew.is_finite() && fnew <= f + 1e-4 * step.min(0.0) && gn.iter().all(|v| v.is_finite()) {
                gn.iter_mut().for_each(|v| *v = -*v);
                accepted = Some((xn, fnew, gn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if mem.is_empty() {
                failed = iterations == 1;
                break;
            }
            mem.clear();
            continue;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if sy > 1e-10 * (ss * yy).sqrt() {
            if mem.len() == MEMORY {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let decrease = f - fnew;
        x = xn;
        g = gn;
        f = fnew;
        if decrease <= 1e-14 * (1.0 + f.abs()) {
            stall += 1;
            if stall >= 3 {
                converged = true;
                break;
            }
        } else {
            stall = 0;
        }
    }
    LocalResult { x, value: -f, iterations, converged, failed }
}

fn two_loop(g: &[f64], free: &[bool], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let n = g.len();
    let mut q: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
    let dot = |a: &[f64], b: &[f64]| -> f64 { (0..n).filter(|&i| free[i]).map(|i| a[i] * b[i]).sum() };
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        for i in 0..n {
            if free[i] {
                q[i] -= a * y[i];
            }
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let sy = dot(s, y);
        let yy = dot(y, y);
        if sy > 0.0 && yy > 0.0 {
            let gamma = sy / yy;
            q.iter_mut().for_each(|v| *v *= gamma);
        }
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for i in 0..n {
            if free[i] {
                q[i] += s[i] * (a - b);
            }
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Multi-start maximization: scores quasi-random raw candidates (plus any
/// `extra` starting points), runs the local solver from the best
/// `n_restarts`, and returns the best terminal point. The returned value is
/// never below the best raw candidate.
pub fn maximize(
    obj: &dyn Objective,
    bounds: &Bounds,
    config: &OptimizerConfig,
    extra: &[Vec<f64>],
) -> Result<OptimResult> {
    config.validate()?;
    let mut candidates = qmc::box_points(config.n_raw_samples, &bounds.lower, &bounds.upper, config.seed);
    for e in extra {
        if e.len() != bounds.dim() {
            return validation("extra candidate has wrong dimension");
        }
        let mut p = e.clone();
        bounds.project(&mut p);
        candidates.push(p);
    }
    let values: Vec<f64> = candidates
        .par_iter()
        .map(|x| {
            let v = obj.value(x);
            if v.is_finite() { v } else { f64::NEG_INFINITY }
        })
        .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let best_raw = order[0];

    let locals: Vec<LocalResult> = order
        .iter()
        .take(config.n_restarts)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&&i| lbfgsb_maximize(obj, bounds, &candidates[i], config.max_iters, config.grad_tol))
        .collect();

    let mut result = OptimResult { x: candidates[best_raw].clone(), value: values[best_raw], degraded: true };
    for local in &locals {
        if local.failed || !local.value.is_finite() {
            continue;
        }
        result.degraded = false;
        if local.value > result.value {
            result.x = local.x.clone();
            result.value = local.value;
        }
    }
    Ok(result)
}
