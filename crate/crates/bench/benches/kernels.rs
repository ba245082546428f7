use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use stablefreq_core::lyapunov::{lambda2_h, q_min_eigenvalue};
use stablefreq_core::rng::{substream, Stream};
use stablefreq_core::sim::{self, RolloutOptions};
use stablefreq_core::train::{bptt_grad, operating_point, training_batch};
use stablefreq_core::{bundled, certify_controller, AnyController, CertifyOptions, InitConfig, MonotoneParams};

fn kernels(c: &mut Criterion) {
    let case = bundled::case39kron();
    let center = operating_point(&case).unwrap();
    let params = MonotoneParams::random(&case, 20, InitConfig::default(), &mut substream(0, Stream::ParamInit, 0)).unwrap();
    let inits = training_batch(&case, &center, &Default::default(), 64, 0, 0);

    c.bench_function("rollout_batch 64x200 (10 machines)", |b| {
        b.iter(|| sim::rollout_batch(&case, black_box(&inits), &params, &RolloutOptions::euler(200, 0.01)))
    });
    c.bench_function("bptt_grad 64x200 (10 machines)", |b| {
        b.iter(|| bptt_grad(&case, black_box(&params), &inits, 200, 0.01, &vec![0.01; case.n]))
    });
    c.bench_function("q_min_eigenvalue (10 machines)", |b| {
        b.iter(|| q_min_eigenvalue(&case, black_box(&center.delta_star), 0.05))
    });
    c.bench_function("lambda2_h (10 machines)", |b| b.iter(|| lambda2_h(&case, black_box(&center.delta_star))));

    let small = bundled::case3();
    let ctrl = AnyController::Monotone(MonotoneParams::droop(&small, &[5.0; 3]).unwrap());
    let opts = CertifyOptions { grid_points: 1000, random_pairs: 1000, theta_samples: 100, state_samples: 100, ..Default::default() };
    let mut group = c.benchmark_group("certify");
    group.sample_size(10);
    group.bench_function("certify droop (3 buses, reduced sampling)", |b| {
        b.iter(|| certify_controller(&small, black_box(&ctrl), &opts))
    });
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
