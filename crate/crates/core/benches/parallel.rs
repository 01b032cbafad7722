//! One-thread rayon pool against the default pool on the workloads that fan
//! out: the multiplier grid search, the smoothness probe and a batch of
//! independent solves.

use std::hint::black_box;
use std::time::Duration;

use cclqr_core::duality::{multiplier_program_grid, smoothness_probe};
use cclqr_core::primal_dual::{solve, InnerStop, OmegaBox, SolverConfig};
use cclqr_core::{par, problems, Vector};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn grid_search(c: &mut Criterion) {
    let prob = problems::double_integrator();
    let omega = OmegaBox::uniform(2, 100.0).unwrap();
    let z = Vector::from_element(2, 1.0);
    let mut group = c.benchmark_group("multiplier_grid");
    group.sample_size(10).measurement_time(Duration::from_secs(10));
    for (name, pool) in pools() {
        for res in [20, 40] {
            group.bench_with_input(BenchmarkId::new(name, res), &res, |b, &res| {
                b.iter(|| pool.install(|| multiplier_program_grid(&prob, &z, res, &omega, 0).unwrap()))
            });
        }
    }
    group.finish();
}

fn smoothness(c: &mut Criterion) {
    let prob = problems::double_integrator();
    let omega = OmegaBox::uniform(2, 100.0).unwrap();
    let mut group = c.benchmark_group("smoothness_probe");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                pool.install(|| smoothness_probe(&prob, &omega, 200, 1e-3, &mut rng).unwrap().mu_hat)
            })
        });
    }
    group.finish();
}

fn budget_runs(c: &mut Criterion) {
    let prob = problems::double_integrator();
    let k0 = prob.gain(problems::double_integrator_initial_gain()).unwrap();
    let budgets = [50usize, 100, 200];
    let mut group = c.benchmark_group("budget_runs");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(name, |b| {
            b.iter(|| {
                pool.install(|| {
                    par::map(&budgets, |&steps| {
                        let cfg = SolverConfig {
                            inner: InnerStop::Steps(steps),
                            dual_iters: 10,
                            ..SolverConfig::benchmark(2)
                        };
                        black_box(solve(&prob, &cfg, &k0, &Vector::zeros(2)).unwrap().len())
                    })
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, grid_search, smoothness, budget_runs);
criterion_main!(benches);
