use lhs_zest::design::Method;
use lhs_zest::harness::{run_sweep, ExperimentConfig, Model};

fn sweep_bytes(threads: usize) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| {
        let model = Model::builtin("poisson-log-d9").unwrap();
        let config = ExperimentConfig::new(
            "poisson-log-d9",
            vec![Method::Lhs, Method::Iid],
            vec![40, 60],
            30,
            8,
        );
        let table = run_sweep(&model, &config).unwrap();
        let mut out = Vec::new();
        table.write_csv(&mut out).unwrap();
        out
    })
}

#[test]
fn output_is_independent_of_thread_count() {
    assert_eq!(sweep_bytes(1), sweep_bytes(4));
}

#[test]
fn lhs_variance_ordering_holds_on_average() {
    // The location score is additive, so LHS beats i.i.d. by far.
    let model = Model::builtin("mean-d1").unwrap();
    let config = ExperimentConfig::new(
        "mean-d1",
        vec![Method::Lhs, Method::Iid],
        vec![10, 20, 40],
        400,
        4,
    );
    let t = run_sweep(&model, &config).unwrap();
    for n in [10, 20, 40] {
        let l = &t.cell(Method::Lhs, n).unwrap().rows[0];
        let i = &t.cell(Method::Iid, n).unwrap().rows[0];
        assert!(l.normalized_variance < i.normalized_variance);
        assert!((i.normalized_variance * 12.0 - 1.0).abs() < 0.25);
    }
}
