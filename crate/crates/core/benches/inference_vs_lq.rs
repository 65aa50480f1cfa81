//! Policy inference against a full condensed LQ solve per horizon length.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hjb_adp::oracle::{discretize, BatchLqProblem, BatchLqSolver, Discretization};
use hjb_adp::trainer::{policy_eval, TrainConfig};
use hjb_adp::vehicle::{LinearDynamics, VehicleParams};

fn inference_vs_lq(c: &mut Criterion) {
    let policy = TrainConfig::default().initial_policy(4, 0.35).unwrap();
    let x = [0.8, -0.05, 0.1, 0.3];
    c.bench_function("policy_eval", |b| b.iter(|| policy_eval(&policy, black_box(&x), black_box(0.1))));

    let dynm = LinearDynamics::new(&VehicleParams::default()).unwrap();
    let sys = discretize(&dynm, 0.005, Discretization::Zoh).unwrap();
    let mut g = c.benchmark_group("lq_batch");
    for n in [10, 30, 60, 100] {
        let p = BatchLqProblem::tracking(&sys, 0.4, 280.0, n).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| {
            b.iter(|| BatchLqSolver::new(black_box(p)).unwrap().solve(&x).unwrap()[0])
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(30);
    targets = inference_vs_lq
}
criterion_main!(benches);
