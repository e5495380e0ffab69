//! Scrambled Sobol base samples.
//!
//! Backed by `sobol_burley`, which supports 256 dimensions and 2^16 points per
//! seed. Larger requests are padded by re-seeding each block of 256 dimensions
//! (and each block of 2^16 points), so samples stay stratified within a block
//! and independent across blocks.

use crate::stats::norm_quantile;
use nalgebra::DMatrix;

const DIMS_PER_SEED: u64 = 256;
const POINTS_PER_SEED: u64 = 1 << 16;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ splitmix64(label.wrapping_add(0x51_7CC1_B727_220A)))
}

/// Uniform sample in the open interval (0, 1).
pub fn uniform(index: u64, dim: u64, seed: u64) -> f64 {
    let block = derive_seed(seed, (dim / DIMS_PER_SEED) << 32 | (index / POINTS_PER_SEED));
    let s = sobol_burley::sample(
        (index % POINTS_PER_SEED) as u32,
        (dim % DIMS_PER_SEED) as u32,
        (block & 0xFFFF_FFFF) as u32,
    );
    // sobol_burley returns multiples of 2^-24 in [0, 1); shift to the cell centre
    (s as f64 + 0.5 / 16_777_216.0).clamp(1e-12, 1.0 - 1e-12)
}

pub fn normal(index: u64, dim: u64, seed: u64) -> f64 {
    norm_quantile(uniform(index, dim, seed))
}

/// `n × dim` matrix of uniform draws, one quasi-random point per row.
pub fn uniform_matrix(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |i, j| uniform(i as u64, j as u64, seed))
}

pub fn normal_matrix(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |i, j| normal(i as u64, j as u64, seed))
}

/// Quasi-random points in a box, one per row.
pub fn box_points(n: usize, lower: &[f64], upper: &[f64], seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            lower
                .iter()
                .zip(upper)
                .enumerate()
                .map(|(j, (lo, hi))| lo + (hi - lo) * uniform(i as u64, j as u64, seed))
                .collect()
        })
        .collect()
}

/// Points `start..start + n` of a scrambled sequence in a box; successive strides of one sequence.
pub fn box_points_from(
    start: usize,
    n: usize,
    lower: &[f64],
    upper: &[f64],
    seed: u64,
) -> Vec<Vec<f64>> {
    (start..start + n)
        .map(|i| {
            lower
                .iter()
                .zip(upper)
                .enumerate()
                .map(|(j, (lo, hi))| lo + (hi - lo) * uniform(i as u64, j as u64, seed))
                .collect()
        })
        .collect()
}
