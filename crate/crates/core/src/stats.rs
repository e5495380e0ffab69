//! Scalar helpers for the standard normal distribution and binary entropy.

use libm::erfc;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc_inv;
use std::f64::consts::{LN_2, PI, SQRT_2};

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// log Φ(x), accurate deep into the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * PI).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

/// Inverse Mills ratio φ(x)/Φ(x).
pub fn inv_mills(x: f64) -> f64 {
    if x > -30.0 {
        norm_pdf(x) / norm_cdf(x)
    } else {
        // continued-fraction tail: φ/Φ ≈ -x / (1 - 1/x² + 3/x⁴)
        let x2 = x * x;
        -x / (1.0 - 1.0 / x2 + 3.0 / (x2 * x2))
    }
}

pub fn norm_quantile(p: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    // one Newton step against the accurate CDF
    let pdf = norm_pdf(x);
    if pdf > 1e-300 {
        x - (norm_cdf(x) - p) / pdf
    } else {
        x
    }
}

/// Binary entropy in bits; zero at the endpoints.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()) / LN_2
}

/// Binary entropy of Φ(s) in bits, computed in log space so the tails stay finite.
pub fn entropy_of_probit(s: f64) -> f64 {
    let lp = log_norm_cdf(s);
    let lq = log_norm_cdf(-s);
    let p = lp.exp();
    let q = lq.exp();
    let h = -(p * lp + q * lq) / LN_2;
    if h.is_finite() {
        h.max(0.0)
    } else {
        0.0
    }
}

/// d/ds of `entropy_of_probit`: φ(s)·log2((1-Φ)/Φ).
pub fn entropy_of_probit_deriv(s: f64) -> f64 {
    let v = norm_pdf(s) * (log_norm_cdf(-s) - log_norm_cdf(s)) / LN_2;
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

pub fn sem(xs: &[f64]) -> f64 {
    std_dev(xs) / (xs.len() as f64).sqrt()
}

/// Paired t statistic of `a − b` with its degrees of freedom. Identical
/// samples give a statistic of 0; a constant nonzero difference gives ±∞.
pub fn paired_t(a: &[f64], b: &[f64]) -> Option<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let se = sem(&d);
    let t = if se > 0.0 {
        m / se
    } else if m == 0.0 {
        0.0
    } else {
        m.signum() * f64::INFINITY
    };
    Some((t, (d.len() - 1) as f64))
}

/// One-sided p-value of the paired t-test for `mean(a − b) > 0`.
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Option<f64> {
    let (t, df) = paired_t(a, b)?;
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some(1.0 - dist.cdf(t))
}

/// Two-sided p-value of the paired t-test for `mean(a − b) ≠ 0`.
pub fn paired_t_two_sided(a: &[f64], b: &[f64]) -> Option<f64> {
    let (t, df) = paired_t(a, b)?;
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((norm_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((norm_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn log_cdf_matches_across_branch() {
        let a = log_norm_cdf(-29.999);
        let b = log_norm_cdf(-30.001);
        assert!((a - b).abs() < 0.1);
        assert!((inv_mills(-29.999) - inv_mills(-30.001)).abs() < 1e-2);
        assert!(log_norm_cdf(-200.0).is_finite());
    }

    #[test]
    fn paired_t_reference_values() {
        // differences 1, 2, 3, 4: t = 2.5 / (1.29099 / 2) = 3.87298, df = 3
        let a = [2.0, 4.0, 6.0, 8.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let (t, df) = paired_t(&a, &b).unwrap();
        assert!((t - 3.872_983_346_207_417).abs() < 1e-12 && df == 3.0);
        // upper tail of t(3) at 3.873 is 0.0152331 (scipy)
        assert!((paired_t_greater(&a, &b).unwrap() - 0.015_233_145_8).abs() < 1e-9);
        assert!((paired_t_two_sided(&a, &b).unwrap() - 0.030_466_291_7).abs() < 1e-9);
        assert_eq!(paired_t_two_sided(&a, &a), Some(1.0));
        assert_eq!(paired_t_greater(&[2.0, 3.0], &[1.0, 2.0]), Some(0.0));
        assert!(paired_t(&a, &b[..3]).is_none());
    }

    #[test]
    fn entropy_bounds() {
        assert!((binary_entropy(0.5) - 1.0).abs() < 1e-15);
        assert_eq!(binary_entropy(0.0), 0.0);
        assert!((entropy_of_probit(0.0) - 1.0).abs() < 1e-12);
        assert!(entropy_of_probit(40.0) >= 0.0);
        let h = 1e-6;
        for s in [-2.0, -0.3, 0.7, 3.0] {
            let fd = (entropy_of_probit(s + h) - entropy_of_probit(s - h)) / (2.0 * h);
            assert!((fd - entropy_of_probit_deriv(s)).abs() < 1e-6);
        }
    }
}
