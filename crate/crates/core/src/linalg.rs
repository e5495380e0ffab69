use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Diagonal jitter applied on successive Cholesky failures, relative to the mean diagonal.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky with jitter escalation. Returns the factor and the absolute jitter added.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Option<(Chol, f64)> {
    cholesky_jittered_floor(m, 1e-300)
}

/// As [`cholesky_jittered`], with the jitter scale bounded below by `floor`.
/// Posterior covariances that have collapsed to zero need a scale from the prior.
pub fn cholesky_jittered_floor(m: &DMatrix<f64>, floor: f64) -> Option<(Chol, f64)> {
    let n = m.nrows();
    if n == 0 {
        return Cholesky::new(m.clone()).map(|c| (c, 0.0));
    }
    let scale = (m.trace() / n as f64).abs().max(floor);
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            if c.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Some((c, jitter));
            }
        }
    }
    None
}

/// A factor `A` with `A Aᵀ ≈ m` for a symmetric PSD matrix: jittered Cholesky,
/// falling back to a clipped eigendecomposition.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    if let Some((c, _)) = cholesky_jittered(&sym) {
        return c.l();
    }
    let eig = sym.symmetric_eigen();
    let mut v = eig.eigenvectors;
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    v
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("non-singular triangular factor")
}

pub fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("non-singular triangular factor")
}

pub fn log_det_chol(c: &Chol) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_singular_matrix() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let (c, jitter) = cholesky_jittered(&m).unwrap();
        assert!(jitter > 0.0);
        let l = c.l();
        assert!(((&l * l.transpose()) - &m).abs().max() < 1e-3);
    }

    #[test]
    fn psd_factor_reconstructs() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.2, 2.0, 0.3, 0.1]);
        let m = &a * a.transpose();
        let f = psd_factor(&m);
        assert!(((&f * f.transpose()) - &m).abs().max() < 1e-6);
    }
}
