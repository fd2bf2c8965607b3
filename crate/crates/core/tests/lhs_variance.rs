//! Variance of the design mean of f(x) = x in one dimension.
//!
//! Under LHS each point is (π(i) - 1 + U_i) / n, so the mean is
//! (n(n-1)/2 + ΣU_i) / n² and its variance is n · (1/12) / n⁴ = 1/(12 n³).
//! The i.i.d. mean has variance 1/(12 n).

use lhs_zest::design::{generate, Method};
use lhs_zest::rngperm::{Purpose, StreamKey};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Independent stratified sampler: one uniform per stratum, drawn with a
/// generator unrelated to the library's streams.
fn oracle_lhs_means(n: usize, reps: usize, seed: u64) -> Vec<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..reps)
        .map(|_| {
            (0..n)
                .map(|k| (k as f64 + rng.random::<f64>()) / n as f64)
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

#[test]
fn closed_form_agrees_with_independent_oracle() {
    for n in [4usize, 16] {
        let v = variance(&oracle_lhs_means(n, 100_000, 1 + n as u64));
        let exact = 1.0 / (12.0 * (n as f64).powi(3));
        assert!(
            (v / exact - 1.0).abs() < 0.03,
            "n={n}: oracle {v} vs {exact}"
        );
    }
}

#[test]
fn library_designs_follow_the_law() {
    for n in [4usize, 16] {
        for (method, exact) in [
            (Method::Lhs, 1.0 / (12.0 * (n as f64).powi(3))),
            (Method::Iid, 1.0 / (12.0 * n as f64)),
        ] {
            let base = StreamKey::new(2024, Purpose::Permutation).with_column(n as u64);
            let means: Vec<f64> = (0..100_000u64)
                .map(|r| {
                    generate(method, n, 1, &base.with_replication(r))
                        .unwrap()
                        .mean()[0]
                })
                .collect();
            let v = variance(&means);
            assert!(
                (v / exact - 1.0).abs() < 0.05,
                "{method} n={n}: {v} vs {exact}"
            );
        }
    }
}
