use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use sdeflow_bench::{rough_drift, rough_transform, unit_grid};
use sdeflow_core::mollify::mollify;
use sdeflow_core::paths::{simulate, BrownianDriver};
use sdeflow_core::resolvent::{solve_psi, ResolventConfig};
use sdeflow_core::zvonkin::simulate_transformed_flow;
use sdeflow_core::{DiffusionSpec, DriftField};

fn euler(c: &mut Criterion) {
    let mut group = c.benchmark_group("euler");
    let s = DiffusionSpec::identity(1);
    let b = rough_drift();
    for dt in [1e-2, 1e-3] {
        let g = unit_grid(dt);
        group.throughput(Throughput::Elements(g.steps as u64));
        group.bench_with_input(BenchmarkId::new("holder", g.steps), &g, |bench, g| {
            let driver = BrownianDriver::new(3, 0, 1, *g);
            bench.iter(|| simulate(&b, &s, black_box(&[0.5]), 0.0, &driver, g).unwrap())
        });
    }
    group.finish();
}

fn increments(c: &mut Criterion) {
    let g = unit_grid(1e-3);
    c.bench_function("driver/increments_1000", |bench| {
        let driver = BrownianDriver::new(3, 0, 1, g);
        bench.iter(|| driver.increments(black_box(&g)).unwrap())
    });
}

fn resolvent(c: &mut Criterion) {
    let mut group = c.benchmark_group("resolvent");
    group.sample_size(10);
    let s = DiffusionSpec::identity(1);
    let b = DriftField::linear(1, vec![-1.0]);
    let cfg = ResolventConfig::new(5.0, 1e-2, 1000);
    group.bench_function("ou_1000_paths", |bench| {
        bench.iter(|| solve_psi(&b, &s, &cfg, black_box(&[vec![0.5]]), 7).unwrap())
    });
    group.finish();
}

fn transform(c: &mut Criterion) {
    let t = rough_transform();
    c.bench_function("transform/invert", |bench| {
        bench.iter(|| t.invert(black_box(&[1.3])).unwrap())
    });
    let g = unit_grid(1e-3);
    let s = DiffusionSpec::identity(1);
    c.bench_function("transform/flow_1000_steps", |bench| {
        let driver = BrownianDriver::new(5, 0, 1, g);
        bench.iter(|| simulate_transformed_flow(&t, &s, black_box(&[0.5]), &driver, &g).unwrap())
    });
}

fn mollified(c: &mut Criterion) {
    let mut group = c.benchmark_group("mollified_eval");
    let b = rough_drift();
    for q in [16, 32] {
        let m = mollify(&b, 8, q).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(q), &m, |bench, m| {
            bench.iter(|| m.eval(black_box(&[0.3])))
        });
    }
    group.finish();
}

criterion_group!(benches, euler, increments, resolvent, transform, mollified);
criterion_main!(benches);
