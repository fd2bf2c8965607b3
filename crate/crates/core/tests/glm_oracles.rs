use lhs_zest::anova::DecompositionSettings;
use lhs_zest::design::{generate, Method};
use lhs_zest::glm::{generate_dataset, GlmFamily};
use lhs_zest::harness::{asymptotic_oracle, run_cell, Model};
use lhs_zest::rngperm::{uniform_stream, Purpose, StreamKey};
use lhs_zest::zsolve::{expected_jacobian, solve, SolverOptions};
use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Maximize a unimodal function on [lo, hi] by golden-section search.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa > fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn newton_matches_likelihood_maximizer() {
    let model = Model::builtin("poisson-log-d1").unwrap();
    let glm = model.glm().unwrap();
    for r in 0..20u64 {
        let key = StreamKey::new(400, Purpose::Permutation).with_replication(r);
        let design = generate(Method::Lhs, 10_000, 1, &key).unwrap();
        let data = generate_dataset(glm.family(), glm.truth(), &design, &key).unwrap();
        let x = design.column(0);
        let loglik = |t: f64| {
            x.iter()
                .zip(&data.responses)
                .map(|(xi, z)| z * t * xi - (t * xi).exp())
                .sum::<f64>()
        };
        let oracle = golden_max(loglik, -5.0, 5.0, 1e-10);
        let fit = solve(
            model.problem(),
            &design,
            &data.aux,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert!(
            (fit.theta_hat[0] - oracle).abs() < 1e-6,
            "rep {r}: {} vs {oracle}",
            fit.theta_hat[0]
        );
    }
}

/// Mean and standard error of each sample column.
fn mean_se(cols: &[Vec<f64>]) -> Vec<(f64, f64)> {
    cols.iter()
        .map(|c| {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, (v / n).sqrt())
        })
        .collect()
}

#[test]
fn score_has_zero_mean_and_bartlett_identity() {
    let n = 400_000;
    for name in ["poisson-log-d1", "poisson-log-d9", "gaussian-identity-d2"] {
        let model = Model::builtin(name).unwrap();
        let p = model.problem();
        let (d, q) = (p.domain_dim(), p.theta_dim());
        let mut rng = StdRng::seed_from_u64(17);
        let mut x = vec![0.0; d];
        let mut psi = vec![0.0; q];
        let mut dot = DMatrix::zeros(q, q);
        let mut scores = vec![Vec::with_capacity(n); q];
        let mut jac = vec![Vec::with_capacity(n); q];
        let mut bartlett = vec![Vec::with_capacity(n); q];
        for _ in 0..n {
            for v in x.iter_mut() {
                *v = rng.random();
            }
            let u = rng.random();
            p.psi(&x, u, &model.truth, &mut psi);
            p.psi_dot(&x, u, &model.truth, &mut dot);
            for i in 0..q {
                scores[i].push(psi[i]);
                jac[i].push(dot[(i, i)]);
                // Canonical link with unit dispersion: E[ψψᵀ + ψ̇] = 0.
                bartlett[i].push(psi[i] * psi[i] + dot[(i, i)]);
            }
        }
        for (m, s) in mean_se(&scores).into_iter().chain(mean_se(&bartlett)) {
            assert!(m.abs() < 4.5 * s, "{name}: mean {m} se {s}");
        }
        let a = expected_jacobian(p, &model.truth, n, &StreamKey::new(3, Purpose::Oracle)).unwrap();
        for (i, (m, s)) in mean_se(&jac).into_iter().enumerate() {
            assert!(
                (a[(i, i)] - m).abs() < 4.5 * std::f64::consts::SQRT_2 * s + 1e-12,
                "{name} ({i},{i}): {} vs {m}",
                a[(i, i)]
            );
        }
    }
}

#[test]
fn gaussian_oracle_matches_replicated_fits() {
    let model = Model::builtin("gaussian-identity-d2").unwrap();
    let oracle = asymptotic_oracle(
        &model,
        1_000_000,
        &DecompositionSettings::default(),
        &StreamKey::new(21, Purpose::Oracle),
    )
    .unwrap();
    let n = 4096;
    let cell = run_cell(
        &model,
        Method::Lhs,
        n,
        10_000,
        22,
        &SolverOptions::default(),
    )
    .unwrap();
    assert_eq!(cell.failures, 0);
    for (row, v) in cell.rows.iter().zip(&oracle.normalized_variances) {
        assert!(
            (row.normalized_variance / v - 1.0).abs() < 0.10,
            "{} vs {v}",
            row.normalized_variance
        );
    }
}

#[test]
fn fixed_aux_reproduces_dataset() {
    let model = Model::builtin("poisson-log-d9").unwrap();
    let glm = model.glm().unwrap();
    let key = StreamKey::new(9, Purpose::Permutation);
    let design = generate(Method::Iid, 50, 9, &key).unwrap();
    let data = generate_dataset(glm.family(), glm.truth(), &design, &key).unwrap();
    assert_eq!(
        data.aux,
        uniform_stream(&key.with_purpose(Purpose::Response), 50)
    );
    for (i, x) in design.rows().enumerate() {
        assert_eq!(glm.response(x, data.aux[i]), data.responses[i]);
    }
    assert_eq!(GlmFamily::poisson_log().dispersion, 1.0);
}
