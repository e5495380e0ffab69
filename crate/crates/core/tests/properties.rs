mod common;

use bope_core::acquisition::{
    bald_base_samples, bald_from_moments, eubo_analytic, eubo_from_moments, noisy_max_constant, noisy_max_lhs,
};
use common::{random_pref_model, random_points};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eubo_is_symmetric_and_above_both_means(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, model) = random_pref_model(&mut rng, k, 6, 8);
        let ys = random_points(&mut rng, 2, k);
        let a = eubo_analytic(&model, &ys[0], &ys[1]).unwrap();
        let b = eubo_analytic(&model, &ys[1], &ys[0]).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= model.mean(&ys[0]).max(model.mean(&ys[1])) - 1e-12);
    }

    #[test]
    fn eubo_grows_with_difference_variance(mu1 in -3.0..3.0f64, mu2 in -3.0..3.0f64, v in 0.0..5.0f64, dv in 0.01..5.0f64) {
        let lo = eubo_from_moments(mu1, mu2, v);
        let hi = eubo_from_moments(mu1, mu2, v + dv);
        prop_assert!(hi >= lo - 1e-12);
        prop_assert!(lo >= mu1.max(mu2) - 1e-12);
        prop_assert!(lo <= mu1.max(mu2) + (v / (2.0 * std::f64::consts::PI)).sqrt() + 1e-12);
    }

    #[test]
    fn bald_is_a_fraction_of_a_bit(mu in -6.0..6.0f64, var in 0.0..20.0f64) {
        let eps = bald_base_samples(4096, 1);
        let b = bald_from_moments(mu, var, &eps);
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&b), "{b}");
    }

    #[test]
    fn noisy_max_lies_between_min_and_max(r1 in -5.0..5.0f64, r2 in -5.0..5.0f64, lambda in 1e-3..10.0f64) {
        let v = noisy_max_lhs(r1, r2, lambda);
        prop_assert!(v <= r1.max(r2) + 1e-12 && v >= r1.min(r2) - 1e-12);
        prop_assert!(v >= r1.max(r2) - lambda * noisy_max_constant() - 1e-12);
    }
}
