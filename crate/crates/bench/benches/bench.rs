use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use slicecc_bench::{shipped, staircase, three_host};
use slicecc_core::netcalc::min_plus_convolve;
use slicecc_core::numopt::dual_descent_solve;
use slicecc_core::{sim, BoundVariant, FlowId, StepSizes};

fn curves(c: &mut Criterion) {
    let f = staircase(16, 3.0);
    let g = staircase(16, 0.0);
    c.bench_function("min_plus_convolve/16x16", |b| b.iter(|| min_plus_convolve(black_box(&f), black_box(&g))));
}

fn bounds(c: &mut Criterion) {
    let p = three_host(BoundVariant::Packetized);
    let ctx = p.context();
    let rates = [40e6, 40e6, 40e6];
    c.bench_function("delay_bound/packetized", |b| {
        b.iter(|| ctx.delay_bound(FlowId(0), black_box(&rates), BoundVariant::Packetized))
    });
}

fn solver(c: &mut Criterion) {
    let steps = StepSizes::uniform(2, 3, 5e-13, 1e-13);
    for variant in [BoundVariant::Overestimate, BoundVariant::Packetized] {
        let p = three_host(variant);
        c.bench_function(&format!("dual_descent_solve/{}", variant.as_str()), |b| {
            b.iter(|| dual_descent_solve(black_box(&p), &steps, 200_000, 0.1))
        });
    }
}

fn simulation(c: &mut Criterion) {
    let cfg = shipped("fig2.scenario", 2.0);
    let mut group = c.benchmark_group("sim");
    group.sample_size(10);
    group.bench_function("fig2/2s", |b| b.iter(|| sim::run(black_box(&cfg))));
    group.finish();
}

criterion_group!(benches, curves, bounds, solver, simulation);
criterion_main!(benches);
