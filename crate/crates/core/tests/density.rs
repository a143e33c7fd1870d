use novelty_sac::{gaussian_tanh_log_prob, gaussian_tanh_sample, GaussianTanhHead};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn head1(mean: f64, log_std: f64) -> GaussianTanhHead {
    GaussianTanhHead::new(vec![mean], vec![log_std]).unwrap()
}

/// Trapezoid rule over the open interval (-1, 1) with `n` panels; the
/// density vanishes at both ends.
fn integrate(head: &GaussianTanhHead, n: usize) -> f64 {
    let h = 2.0 / n as f64;
    (1..n)
        .map(|k| gaussian_tanh_log_prob(head, &[-1.0 + k as f64 * h]).exp())
        .sum::<f64>()
        * h
}

#[test]
fn density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let head = head1(rng.random_range(-1.5..1.5), rng.random_range(-1.5..0.5));
        let mass = integrate(&head, 100_000);
        assert!((mass - 1.0).abs() < 1e-3, "{head:?}: {mass}");
    }
}

#[test]
fn density_matches_empirical_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let head = head1(0.4, -0.6);
    let mut samples: Vec<f64> = (0..1_000_000)
        .map(|_| gaussian_tanh_sample(&head, &[rng.sample(StandardNormal)]).unwrap().0[0])
        .collect();
    samples.sort_by(f64::total_cmp);
    let cdf = |x: f64| samples.partition_point(|&s| s <= x) as f64 / samples.len() as f64;
    let delta = 0.02;
    for k in 0..100 {
        // interior quantiles, where the empirical slope is well resolved
        let a = samples[100_000 + k * 8_000];
        let numeric = (cdf(a + delta) - cdf(a - delta)) / (2.0 * delta);
        let exact = gaussian_tanh_log_prob(&head, &[a]).exp();
        assert!((numeric - exact).abs() < 0.05 * exact, "a={a}: {numeric} vs {exact}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn samples_round_trip_and_stay_inside(
        mean in prop::collection::vec(-2.0f64..2.0, 2),
        log_std in prop::collection::vec(-3.0f64..0.5, 2),
        z in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let head = GaussianTanhHead::new(mean, log_std).unwrap();
        let (a, lp) = gaussian_tanh_sample(&head, &z).unwrap();
        prop_assert!(a.iter().all(|v| v.abs() < 1.0));
        prop_assert!((gaussian_tanh_log_prob(&head, &a) - lp).abs() < 1e-9);
    }

    #[test]
    fn extreme_noise_stays_inside(mean in -30.0f64..30.0, log_std in -5.0f64..2.0, z in -40.0f64..40.0) {
        let (a, lp) = gaussian_tanh_sample(&head1(mean, log_std), &[z]).unwrap();
        prop_assert!(a[0].abs() < 1.0);
        prop_assert!(lp.is_finite());
    }
}
