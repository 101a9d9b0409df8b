//! Wall-time benchmarks of the three pipeline stages: expansion build,
//! reduced re-solve on new samples, and one full-order reference solve.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use stolatin::{
    newton_solve_sample, solve, update_stage, McsOptions, SolverOptions, UpdateOptions,
};
use stolatin_bench::bench_problem;

fn bench_solve(c: &mut Criterion) {
    let problem = bench_problem().unwrap();
    let opts = SolverOptions {
        max_terms: 4,
        ..SolverOptions::default()
    };
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("expansion_4_terms", |b| {
        b.iter(|| {
            let samples = problem.draw_samples(20, 7).unwrap();
            black_box(solve(&problem, samples, &opts).unwrap())
        })
    });
    group.finish();
}

fn bench_update(c: &mut Criterion) {
    let problem = bench_problem().unwrap();
    let opts = SolverOptions {
        max_terms: 4,
        ..SolverOptions::default()
    };
    let state = solve(&problem, problem.draw_samples(20, 7).unwrap(), &opts).unwrap();
    let samples = problem.draw_samples(50, 8).unwrap();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("reduced_resolve_50_samples", |b| {
        b.iter(|| black_box(update_stage(&problem, &state, &samples, &UpdateOptions::default()).unwrap()))
    });
    group.finish();
}

fn bench_full_order(c: &mut Criterion) {
    let problem = bench_problem().unwrap();
    let samples = problem.draw_samples(1, 9).unwrap();
    let mp = problem.material_realization(samples.row(0)).unwrap();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("full_order_single_sample", |b| {
        b.iter(|| black_box(newton_solve_sample(&problem, &mp, &McsOptions::default()).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_solve, bench_update, bench_full_order);
criterion_main!(benches);
