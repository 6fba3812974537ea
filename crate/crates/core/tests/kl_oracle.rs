//! Closed-form KL against a Monte Carlo estimate of `E_q[log q - log p]`.

use cinfer::density::kl_standard_normal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn monte_carlo_kl(mu: &[f64], log_var: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for (m, lv) in mu.iter().zip(log_var) {
            let e: f64 = StandardNormal.sample(rng);
            let z = m + (0.5 * lv).exp() * e;
            // log q(z) - log p(z); the 2*pi terms cancel.
            log_ratio += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        acc += log_ratio;
    }
    acc / samples as f64
}

#[test]
fn closed_form_matches_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..10 {
        let dim = rng.random_range(1..=6);
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let log_var: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = kl_standard_normal(&mu, &log_var);
        let estimate = monte_carlo_kl(&mu, &log_var, 1_000_000, &mut rng);
        let rel = (estimate - exact).abs() / exact;
        assert!(rel < 0.02, "case {case}: exact {exact} estimate {estimate}");
    }
}

#[test]
fn zero_at_prior_and_positive_elsewhere() {
    assert_eq!(kl_standard_normal(&[0.0; 4], &[0.0; 4]), 0.0);
    assert!(kl_standard_normal(&[0.1], &[0.0]) > 0.0);
    assert!(kl_standard_normal(&[0.0], &[-0.1]) > 0.0);
}
