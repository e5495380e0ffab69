//! Benchmark outcome functions, utilities, simulated decision-makers and
//! outcome-box estimation.

use crate::error::{validation, BopeError, Result};
use crate::optim::Bounds;
use crate::pref::{probit_likelihood, Query, Response};
use crate::qmc;
use crate::stats::norm_cdf;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::OnceLock;

/// Per-output min/max used to map raw outcomes to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

const NORMALIZATION_JSON: &str = include_str!("../data/normalization.json");

fn frozen_normalization(name: &str) -> Option<&'static Normalization> {
    static TABLE: OnceLock<BTreeMap<String, Normalization>> = OnceLock::new();
    TABLE
        .get_or_init(|| serde_json::from_str(NORMALIZATION_JSON).expect("normalization data is valid JSON"))
        .get(name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Dtlz2,
    VehicleSafety,
    CarCab,
    Osy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProblem {
    pub kind: ProblemKind,
    pub d: usize,
    pub k: usize,
    pub bounds: Bounds,
    /// Applied after the raw (maximization-oriented) outputs, when present.
    pub normalization: Option<Normalization>,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Dtlz2 => "dtlz2",
            ProblemKind::VehicleSafety => "vehicle-safety",
            ProblemKind::CarCab => "car-cab",
            ProblemKind::Osy => "osy",
        }
    }
}

/// Negated DTLZ2 with `k` objectives on `[0, 1]^d`.
pub fn dtlz2(x: &[f64], k: usize) -> Result<Vec<f64>> {
    let d = x.len();
    if d <= k || k == 0 {
        return validation("DTLZ2 requires d > k >= 1");
    }
    let g: f64 = x[k - 1..].iter().map(|v| (v - 0.5).powi(2)).sum();
    Ok((0..k)
        .map(|j| {
            let mut f = 1.0 + g;
            for xi in &x[..k - 1 - j] {
                f *= (FRAC_PI_2 * xi).cos();
            }
            if j > 0 {
                f *= (FRAC_PI_2 * x[k - 1 - j]).sin();
            }
            -f
        })
        .collect())
}

/// Vehicle crash-worthiness objectives (mass, acceleration, toe-board
/// intrusion), negated for maximization.
pub fn vehicle_safety_raw(x: &[f64]) -> Vec<f64> {
    let (x1, x2, x3, x4, x5) = (x[0], x[1], x[2], x[3], x[4]);
    let f1 = 1640.2823 + 2.3573285 * x1 + 2.3220035 * x2 + 4.5688768 * x3 + 7.7213633 * x4 + 4.4559504 * x5;
    let f2 = 6.5856 + 1.15 * x1 - 1.0427 * x2 + 0.9738 * x3 + 0.8364 * x4 - 0.3695 * x1 * x4 + 0.0861 * x1 * x5
        + 0.3628 * x2 * x4
        - 0.1106 * x1 * x1
        - 0.3437 * x3 * x3
        + 0.1764 * x4 * x4;
    let f3 = -0.0551 + 0.0181 * x1 + 0.1024 * x2 + 0.0421 * x3 - 0.0073 * x1 * x2 + 0.024 * x2 * x3
        - 0.0118 * x2 * x4
        - 0.0204 * x3 * x4
        - 0.008 * x3 * x5
        - 0.0241 * x2 * x2
        + 0.0109 * x4 * x4;
    vec![-f1, -f2, -f3]
}

/// Car side-impact cab design objectives with the stochastic inputs fixed at
/// their means, negated for maximization.
pub fn car_cab_raw(x: &[f64]) -> Vec<f64> {
    let (x1, x2, x3, x4, x5, x6, x7) = (x[0], x[1], x[2], x[3], x[4], x[5], x[6]);
    let (x8, x9, x10, x11) = (0.345, 0.192, 0.0, 0.0);
    let f1 = 1.98 + 4.9 * x1 + 6.67 * x2 + 6.98 * x3 + 4.01 * x4 + 1.78 * x5 + 0.00001 * x6 + 2.73 * x7;
    let f2 = (1.16 - 0.3717 * x2 * x4 - 0.00931 * x2 * x10 - 0.484 * x3 * x9 + 0.01343 * x6 * x10).max(0.0);
    let f3 = ((0.261 - 0.0159 * x1 * x2 - 0.188 * x1 * x8 - 0.019 * x2 * x7 + 0.0144 * x3 * x5 + 0.87570001 * x5 * x10
        + 0.08045 * x6 * x9
        + 0.00139 * x8 * x11
        + 0.00001575 * x10 * x11)
        / 0.32)
        .max(0.0);
    let f4 = ((0.214 + 0.00817 * x5 - 0.131 * x1 * x8 - 0.0704 * x1 * x9 + 0.03099 * x2 * x6 - 0.018 * x2 * x7
        + 0.0208 * x3 * x8
        + 0.121 * x3 * x9
        - 0.00364 * x5 * x6
        + 0.0007715 * x5 * x10
        - 0.0005354 * x6 * x10
        + 0.00121 * x8 * x11
        + 0.00184 * x9 * x10
        - 0.018 * x2 * x2)
        / 0.32)
        .max(0.0);
    let f5 = ((0.74 - 0.61 * x2 - 0.163 * x3 * x8 + 0.001232 * x3 * x10 - 0.166 * x7 * x9 + 0.227 * x2 * x2) / 0.32).max(0.0);
    let b1 = 28.98 + 3.818 * x3 - 4.2 * x1 * x2 + 0.0207 * x5 * x10 + 6.63 * x6 * x9 - 7.77 * x7 * x8 + 0.32 * x9 * x10;
    let b2 = 33.86 + 2.95 * x3 + 0.1792 * x10 - 5.057 * x1 * x2 - 11.0 * x2 * x8 - 0.0215 * x5 * x10 - 9.98 * x7 * x8
        + 22.0 * x8 * x9;
    let b3 = 46.36 - 9.9 * x2 - 12.9 * x1 * x8 + 0.1107 * x3 * x10;
    let f6 = (((b1 + b2 + b3) / 3.0 - 32.0) / 32.0).max(0.0);
    let f7 = ((4.72 - 0.5 * x4 - 0.19 * x2 * x3 - 0.0122 * x4 * x10 + 0.009325 * x6 * x10 + 0.000191 * x11 * x11 - 4.0) / 4.0)
        .max(0.0);
    let f8 = ((10.58 - 0.674 * x1 * x2 - 1.95 * x2 * x8 + 0.02054 * x3 * x10 - 0.0198 * x4 * x10 + 0.028 * x6 * x10 - 9.9)
        / 9.9)
        .max(0.0);
    let f9 = ((16.45 - 0.489 * x3 * x7 - 0.843 * x5 * x6 + 0.0432 * x9 * x10 - 0.0556 * x9 * x11 - 0.000786 * x11 * x11
        - 15.7)
        / 15.7)
        .max(0.0);
    [f1, f2, f3, f4, f5, f6, f7, f8, f9].iter().map(|f| -f).collect()
}

/// OSY with sign-flipped objectives followed by its six constraint values
/// (feasible when non-negative).
pub fn osy_raw(x: &[f64]) -> Vec<f64> {
    let (x1, x2, x3, x4, x5, x6) = (x[0], x[1], x[2], x[3], x[4], x[5]);
    let f1 = -(25.0 * (x1 - 2.0).powi(2) + (x2 - 2.0).powi(2) + (x3 - 1.0).powi(2) + (x4 - 4.0).powi(2) + (x5 - 1.0).powi(2));
    let f2 = x.iter().map(|v| v * v).sum::<f64>();
    vec![
        -f1,
        -f2,
        x1 + x2 - 2.0,
        6.0 - x1 - x2,
        2.0 - x2 + x1,
        2.0 - x1 + 3.0 * x2,
        4.0 - (x3 - 3.0).powi(2) - x4,
        (x5 - 3.0).powi(2) + x6 - 4.0,
    ]
}

impl OutcomeProblem {
    pub fn dtlz2(d: usize, k: usize) -> Result<Self> {
        if d <= k || k == 0 {
            return validation("DTLZ2 requires d > k >= 1");
        }
        Ok(Self { kind: ProblemKind::Dtlz2, d, k, bounds: Bounds::unit(d), normalization: None })
    }

    pub fn vehicle_safety() -> Self {
        Self {
            kind: ProblemKind::VehicleSafety,
            d: 5,
            k: 3,
            bounds: Bounds { lower: vec![1.0; 5], upper: vec![3.0; 5] },
            normalization: frozen_normalization("vehicle-safety").cloned(),
        }
    }

    pub fn car_cab() -> Self {
        Self {
            kind: ProblemKind::CarCab,
            d: 7,
            k: 9,
            bounds: Bounds {
                lower: vec![0.5, 0.45, 0.5, 0.5, 0.875, 0.4, 0.4],
                upper: vec![1.5, 1.35, 1.5, 1.5, 2.625, 1.2, 1.2],
            },
            normalization: frozen_normalization("car-cab").cloned(),
        }
    }

    pub fn osy() -> Self {
        Self {
            kind: ProblemKind::Osy,
            d: 6,
            k: 8,
            bounds: Bounds { lower: vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0], upper: vec![10.0, 10.0, 5.0, 6.0, 5.0, 10.0] },
            normalization: None,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "dtlz2" => Self::dtlz2(8, 4),
            "vehicle-safety" => Ok(Self::vehicle_safety()),
            "car-cab" => Ok(Self::car_cab()),
            "osy" => Ok(Self::osy()),
            other => validation(format!("unknown problem '{other}'; valid: dtlz2, vehicle-safety, car-cab, osy")),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Maximization-oriented outputs before normalization.
    pub fn eval_raw(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            ProblemKind::Dtlz2 => dtlz2(x, self.k).expect("validated dimensions"),
            ProblemKind::VehicleSafety => vehicle_safety_raw(x),
            ProblemKind::CarCab => car_cab_raw(x),
            ProblemKind::Osy => osy_raw(x),
        }
    }

    fn eval_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let raw = self.eval_raw(x);
        match &self.normalization {
            Some(n) => raw
                .iter()
                .zip(n.min.iter().zip(&n.max))
                .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
                .collect(),
            None => raw,
        }
    }

    /// Evaluates the outcome function; `x` must lie in the problem's box.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return validation(format!("{} expects {} inputs", self.name(), self.d));
        }
        let tol = 1e-9;
        let inside = x
            .iter()
            .zip(self.bounds.lower.iter().zip(&self.bounds.upper))
            .all(|(v, (l, u))| v.is_finite() && *v >= l - tol && *v <= u + tol);
        if !inside {
            return validation(format!("design outside the {} box", self.name()));
        }
        Ok(self.eval_unchecked(x))
    }

    /// Empirical min/max of the raw outputs over `n` quasi-random designs.
    pub fn raw_range(&self, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.k];
        let mut hi = vec![f64::NEG_INFINITY; self.k];
        let mut x = vec![0.0; self.d];
        for i in 0..n {
            for j in 0..self.d {
                let u = qmc::uniform(i as u64, j as u64, seed);
                x[j] = self.bounds.lower[j] + u * (self.bounds.upper[j] - self.bounds.lower[j]);
            }
            for (o, v) in self.eval_raw(&x).into_iter().enumerate() {
                lo[o] = lo[o].min(v);
                hi[o] = hi[o].max(v);
            }
        }
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum UtilityFunction {
    PiecewiseLinear { beta1: Vec<f64>, beta2: Vec<f64>, t: Vec<f64> },
    Linear { beta: Vec<f64> },
    Kumaraswamy { a: Vec<f64>, b: Vec<f64> },
    L1 { target: Vec<f64> },
    OsySigmoid { y_min: Vec<f64>, y_max: Vec<f64> },
}

/// Kumaraswamy CDF `1 − (1 − y^a)^b`, with `y` clamped to [0, 1].
pub fn kumaraswamy_cdf(y: f64, a: f64, b: f64) -> f64 {
    let y = y.clamp(0.0, 1.0);
    1.0 - (1.0 - y.powf(a)).powf(b)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl UtilityFunction {
    pub fn k(&self) -> usize {
        match self {
            UtilityFunction::PiecewiseLinear { beta1, .. } => beta1.len(),
            UtilityFunction::Linear { beta } => beta.len(),
            UtilityFunction::Kumaraswamy { a, .. } => a.len(),
            UtilityFunction::L1 { target } => target.len(),
            UtilityFunction::OsySigmoid { y_min, .. } => y_min.len(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            UtilityFunction::PiecewiseLinear { .. } => "piecewise-linear",
            UtilityFunction::Linear { .. } => "linear",
            UtilityFunction::Kumaraswamy { .. } => "kumaraswamy",
            UtilityFunction::L1 { .. } => "l1",
            UtilityFunction::OsySigmoid { .. } => "sigmoid",
        }
    }

    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.k() {
            return validation(format!("utility expects {} outcomes, got {}", self.k(), y.len()));
        }
        Ok(self.eval_unchecked(y))
    }

    pub fn eval_unchecked(&self, y: &[f64]) -> f64 {
        match self {
            UtilityFunction::PiecewiseLinear { beta1, beta2, t } => (0..y.len())
                .map(|i| {
                    if y[i] < t[i] {
                        beta1[i] * y[i] + (beta2[i] - beta1[i]) * t[i]
                    } else {
                        beta2[i] * y[i]
                    }
                })
                .sum(),
            UtilityFunction::Linear { beta } => beta.iter().zip(y).map(|(b, v)| b * v).sum(),
            UtilityFunction::Kumaraswamy { a, b } => (0..y.len()).map(|i| kumaraswamy_cdf(y[i], a[i], b[i])).product(),
            UtilityFunction::L1 { target } => -target.iter().zip(y).map(|(t, v)| (t - v).abs()).sum::<f64>(),
            UtilityFunction::OsySigmoid { y_min, y_max } => {
                let n1 = (y[0] - y_min[0]) / (y_max[0] - y_min[0]);
                let n2 = (y[1] - y_min[1]) / (y_max[1] - y_min[1]);
                let mut u = n1.exp() + n2.exp();
                for j in 2..y.len() {
                    u *= sigmoid(50.0 * y[j] / (-y_min[j]).min(y_max[j]));
                }
                u
            }
        }
    }
}

/// The benchmark pairings of outcome problems and utility families.
pub const BENCHMARKS: [&str; 8] = [
    "vehicle-safety/piecewise-linear",
    "vehicle-safety/kumaraswamy",
    "dtlz2/piecewise-linear",
    "dtlz2/l1",
    "osy/piecewise-linear",
    "osy/sigmoid",
    "car-cab/piecewise-linear",
    "car-cab/linear",
];

pub const OSY_RANGE_SAMPLES: usize = 1_000_000;

pub fn utility_for(problem: &OutcomeProblem, family: &str) -> Result<UtilityFunction> {
    let unsupported = || -> Result<UtilityFunction> {
        validation(format!("no '{family}' utility for {}; valid pairs: {}", problem.name(), BENCHMARKS.join(", ")))
    };
    Ok(match (problem.kind, family) {
        (ProblemKind::Dtlz2, "piecewise-linear") if problem.k == 4 => UtilityFunction::PiecewiseLinear {
            beta1: vec![4.0, 3.0, 2.0, 1.0],
            beta2: vec![0.4, 0.3, 0.2, 0.1],
            t: vec![1.0; 4],
        },
        (ProblemKind::Dtlz2, "l1") => UtilityFunction::L1 { target: dtlz2(&vec![0.5; problem.d], problem.k)? },
        (ProblemKind::VehicleSafety, "piecewise-linear") => UtilityFunction::PiecewiseLinear {
            beta1: vec![2.0, 6.0, 8.0],
            beta2: vec![1.0, 2.0, 2.0],
            t: vec![0.5, 0.8, 0.8],
        },
        (ProblemKind::VehicleSafety, "kumaraswamy") => {
            UtilityFunction::Kumaraswamy { a: vec![0.5, 1.0, 1.5], b: vec![1.0, 2.0, 3.0] }
        }
        (ProblemKind::CarCab, "piecewise-linear") => UtilityFunction::PiecewiseLinear {
            beta1: (0..9).map(|i| 7.0 - 0.25 * i as f64).collect(),
            beta2: vec![0.5, 0.4, 0.375, 0.35, 0.325, 0.3, 0.275, 0.25, 0.225],
            t: (0..9).map(|i| 0.55 - 0.01 * i as f64).collect(),
        },
        (ProblemKind::CarCab, "linear") => UtilityFunction::Linear { beta: (0..9).map(|i| 2.25 - 0.25 * i as f64).collect() },
        (ProblemKind::Osy, "piecewise-linear") => UtilityFunction::PiecewiseLinear {
            beta1: [0.02, 0.2].into_iter().chain([10.0; 6]).collect(),
            beta2: [0.01, 0.1].into_iter().chain([0.1; 6]).collect(),
            t: [1000.0, -100.0].into_iter().chain([0.0; 6]).collect(),
        },
        (ProblemKind::Osy, "sigmoid") => {
            let n = frozen_normalization("osy").cloned().unwrap_or_else(|| {
                let (min, max) = problem.raw_range(OSY_RANGE_SAMPLES, 0);
                Normalization { min, max, n_samples: OSY_RANGE_SAMPLES, seed: 0 }
            });
            UtilityFunction::OsySigmoid { y_min: n.min, y_max: n.max }
        }
        _ => return unsupported(),
    })
}

/// A named problem/utility pairing, e.g. `"vehicle-safety/kumaraswamy"`.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub problem: OutcomeProblem,
    pub utility: UtilityFunction,
}

impl Benchmark {
    pub fn by_name(name: &str) -> Result<Self> {
        let (p, u) = name
            .split_once('/')
            .ok_or_else(|| BopeError::Validation(format!("benchmark '{name}' must look like problem/utility")))?;
        let problem = OutcomeProblem::by_name(p)?;
        let utility = utility_for(&problem, u)?;
        Ok(Self { problem, utility })
    }

    pub fn name(&self) -> String {
        format!("{}/{}", self.problem.name(), self.utility.family())
    }

    /// Ground-truth utility of a design.
    pub fn true_value(&self, x: &[f64]) -> Result<f64> {
        self.utility.eval(&self.problem.eval(x)?)
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Hyperrectangle believed to bound the achievable outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn to_bounds(&self) -> Bounds {
        Bounds { lower: self.lower.clone(), upper: self.upper.clone() }
    }
}

pub const Y0_MIN_WIDTH: f64 = 1e-6;

/// Expands observed per-output extremes by `expansion` of the range on each
/// side, doubled on a side whose extreme is (numerically) zero.
pub fn expand_range(lo: &[f64], hi: &[f64], expansion: f64) -> BoxBounds {
    let mut lower = Vec::with_capacity(lo.len());
    let mut upper = Vec::with_capacity(lo.len());
    for (l, h) in lo.iter().zip(hi) {
        let range = h - l;
        if range < Y0_MIN_WIDTH {
            let mid = 0.5 * (l + h);
            lower.push(mid - Y0_MIN_WIDTH / 2.0);
            upper.push(mid + Y0_MIN_WIDTH / 2.0);
            continue;
        }
        let zero_tol = 0.01 * range;
        let down = if l.abs() < zero_tol { 2.0 * expansion } else { expansion };
        let up = if h.abs() < zero_tol { 2.0 * expansion } else { expansion };
        lower.push(l - down * range);
        upper.push(h + up * range);
    }
    BoxBounds { lower, upper }
}

pub const Y0_DEFAULT_SAMPLES: usize = 1_000_000;
pub const Y0_DEFAULT_EXPANSION: f64 = 0.1;

/// Estimates Y₀ from `n_samples` quasi-random designs.
pub fn estimate_y0(problem: &OutcomeProblem, n_samples: usize, expansion: f64, seed: u64) -> BoxBounds {
    let mut lo = vec![f64::INFINITY; problem.k];
    let mut hi = vec![f64::NEG_INFINITY; problem.k];
    let mut x = vec![0.0; problem.d];
    for i in 0..n_samples {
        for j in 0..problem.d {
            let u = qmc::uniform(i as u64, j as u64, seed);
            x[j] = problem.bounds.lower[j] + u * (problem.bounds.upper[j] - problem.bounds.lower[j]);
        }
        for (o, v) in problem.eval_unchecked(&x).into_iter().enumerate() {
            lo[o] = lo[o].min(v);
            hi[o] = hi[o].max(v);
        }
    }
    expand_range(&lo, &hi, expansion)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum DmNoise {
    /// The lower-utility option is chosen with probability `p`.
    ConstantFlip { p: f64 },
    /// Probit comparison noise with scale `lambda`.
    Probit { lambda: f64 },
}

impl DmNoise {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DmNoise::ConstantFlip { p } if !(0.0..0.5).contains(&p) => validation("flip probability must be in [0, 0.5)"),
            DmNoise::Probit { lambda } if !(lambda >= 0.0) => validation("probit lambda must be non-negative"),
            _ => Ok(()),
        }
    }
}

/// A decision-maker answering queries from a known utility.
#[derive(Clone, Debug)]
pub struct SimulatedDm {
    pub utility: UtilityFunction,
    pub noise: DmNoise,
    rng: ChaCha8Rng,
}

impl SimulatedDm {
    pub fn new(utility: UtilityFunction, noise: DmNoise, seed: u64) -> Result<Self> {
        noise.validate()?;
        Ok(Self { utility, noise, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Answers a query; ties are broken uniformly at random.
    pub fn respond(&mut self, query: &Query) -> Result<Response> {
        let u1 = self.utility.eval(&query.y1)?;
        let u2 = self.utility.eval(&query.y2)?;
        let first = match self.noise {
            DmNoise::ConstantFlip { p } => {
                if u1 == u2 {
                    self.rng.gen::<f64>() < 0.5
                } else {
                    let flip = self.rng.gen::<f64>() < p;
                    (u1 > u2) != flip
                }
            }
            DmNoise::Probit { lambda } => self.rng.gen::<f64>() < probit_likelihood(u1, u2, lambda)?,
        };
        Ok(if first { Response::First } else { Response::Second })
    }
}

/// Utility differences between random pairs of top-decile designs.
pub fn top_decile_gaps(benchmark: &Benchmark, n_designs: usize, n_pairs: usize, seed: u64) -> Vec<f64> {
    let p = &benchmark.problem;
    let mut utils: Vec<f64> = qmc::box_points(n_designs, &p.bounds.lower, &p.bounds.upper, seed)
        .iter()
        .map(|x| benchmark.utility.eval_unchecked(&p.eval_unchecked(x)))
        .collect();
    utils.sort_by(|a, b| b.total_cmp(a));
    let top = &utils[..(n_designs / 10).max(2)];
    let mut rng = ChaCha8Rng::seed_from_u64(qmc::derive_seed(seed, 3));
    (0..n_pairs)
        .map(|_| {
            let i = rng.gen_range(0..top.len());
            let mut j = rng.gen_range(0..top.len() - 1);
            if j >= i {
                j += 1;
            }
            (top[i] - top[j]).abs()
        })
        .collect()
}

/// Expected probit error rate over the given utility gaps.
pub fn expected_error(gaps: &[f64], lambda: f64) -> f64 {
    let s = std::f64::consts::SQRT_2 * lambda;
    gaps.iter()
        .map(|g| if *g == 0.0 { 0.5 } else if lambda == 0.0 { 0.0 } else { norm_cdf(-g / s) })
        .sum::<f64>()
        / gaps.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub lambda: f64,
    pub error_rate: f64,
    pub n_designs: usize,
    pub n_pairs: usize,
}

/// Finds λ whose expected comparison error over top-decile pairs equals
/// `target_error`, by bisection on log λ.
pub fn calibrate_probit_lambda(
    benchmark: &Benchmark,
    target_error: f64,
    n_designs: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<Calibration> {
    if !(target_error > 0.0 && target_error < 0.5) {
        return validation("target error must be in (0, 0.5)");
    }
    let gaps = top_decile_gaps(benchmark, n_designs, n_pairs, seed);
    let scale = gaps.iter().copied().fold(0.0, f64::max);
    if scale <= 0.0 {
        return Err(BopeError::Numerical("all top-decile utilities are tied; cannot calibrate".into()));
    }
    let (mut lo, mut hi) = (scale * 1e-12, scale * 1e3);
    let (e_lo, e_hi) = (expected_error(&gaps, lo), expected_error(&gaps, hi));
    if !(e_lo <= target_error && e_hi >= target_error) {
        return Err(BopeError::Numerical(format!(
            "target error {target_error} not bracketed: error({lo:.3e}) = {e_lo:.4}, error({hi:.3e}) = {e_hi:.4}"
        )));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if expected_error(&gaps, mid) < target_error {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-10 {
            break;
        }
    }
    let lambda = (lo * hi).sqrt();
    Ok(Calibration { lambda, error_rate: expected_error(&gaps, lambda), n_designs, n_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtlz2_sphere_identity() {
        let x = [0.5; 8];
        let f = dtlz2(&x, 4).unwrap();
        assert!((f.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let x = [0.1, 0.7, 0.3, 0.9, 0.2, 0.4, 0.6, 0.8];
        let g: f64 = x[3..].iter().map(|v: &f64| (v - 0.5).powi(2)).sum();
        let f = dtlz2(&x, 4).unwrap();
        assert!((f.iter().map(|v| v * v).sum::<f64>() - (1.0 + g).powi(2)).abs() < 1e-10);
        assert!(dtlz2(&[0.5; 4], 4).is_err());
    }

    #[test]
    fn piecewise_kink_is_continuous() {
        let b = Benchmark::by_name("vehicle-safety/piecewise-linear").unwrap();
        assert!((b.utility.eval(&[0.5, 0.8, 0.8]).unwrap() - 3.7).abs() < 1e-12);
    }

    #[test]
    fn y0_zero_side_doubles() {
        let b = expand_range(&[-2.0], &[0.0], 0.1);
        assert!((b.lower[0] + 2.2).abs() < 1e-12 && (b.upper[0] - 0.4).abs() < 1e-12);
        let c = expand_range(&[1.0], &[1.0], 0.1);
        assert!((c.upper[0] - c.lower[0] - Y0_MIN_WIDTH).abs() < 1e-15);
    }

    #[test]
    fn noiseless_dm_picks_argmax() {
        let b = Benchmark::by_name("dtlz2/l1").unwrap();
        let mut dm = SimulatedDm::new(b.utility.clone(), DmNoise::ConstantFlip { p: 0.0 }, 1).unwrap();
        let q = Query::new(b.problem.eval(&[0.5; 8]).unwrap(), b.problem.eval(&[0.1; 8]).unwrap()).unwrap();
        for _ in 0..20 {
            assert_eq!(dm.respond(&q).unwrap(), Response::First);
        }
    }

    #[test]
    fn unknown_names_are_rejected() {
        assert!(Benchmark::by_name("dtlz2/kumaraswamy").is_err());
        assert!(Benchmark::by_name("nope/linear").is_err());
        for name in BENCHMARKS {
            assert_eq!(Benchmark::by_name(name).unwrap().name(), name);
        }
    }

    /// Regenerates `data/normalization.json`; run with `--ignored --nocapture`.
    #[test]
    #[ignore]
    fn print_normalization_constants() {
        let mut table = BTreeMap::new();
        for p in [OutcomeProblem::vehicle_safety(), OutcomeProblem::car_cab(), OutcomeProblem::osy()] {
            let (min, max) = p.raw_range(1_000_000, 0);
            table.insert(p.name().to_string(), Normalization { min, max, n_samples: 1_000_000, seed: 0 });
        }
        println!("{}", serde_json::to_string_pretty(&table).unwrap());
    }
}
