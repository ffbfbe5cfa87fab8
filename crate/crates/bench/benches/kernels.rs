use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nsk_bench::fixture;
use nsk_core::dynamics::{momentum_rhs, rk4_step, solve_pressure};
use nsk_core::nonlocal::korteweg_force;

const SIZES: [usize; 2] = [64, 128];

fn transforms(c: &mut Criterion) {
    let mut group = c.benchmark_group("fft");
    for n in SIZES {
        let (state, _) = fixture(n);
        group.bench_with_input(BenchmarkId::new("forward", n), &state.rho, |b, f| {
            b.iter(|| black_box(f.forward()))
        });
        let hat = state.rho.forward();
        group.bench_with_input(BenchmarkId::new("inverse", n), &hat, |b, f| {
            b.iter(|| black_box(f.inverse()))
        });
    }
    group.finish();
}

fn operators(c: &mut Criterion) {
    let mut group = c.benchmark_group("operators");
    group.sample_size(20);
    for n in SIZES {
        let (state, params) = fixture(n);
        group.bench_with_input(BenchmarkId::new("korteweg", n), &state, |b, s| {
            b.iter(|| korteweg_force(&s.rho, params.kappa, params.capillarity()).unwrap())
        });
        let force = korteweg_force(&state.rho, params.kappa, params.capillarity()).unwrap();
        group.bench_with_input(BenchmarkId::new("pressure", n), &state, |b, s| {
            b.iter(|| solve_pressure(&s.rho, &force).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("momentum_rhs", n), &state, |b, s| {
            b.iter(|| momentum_rhs(s, &params).unwrap())
        });
    }
    group.finish();
}

fn stepping(c: &mut Criterion) {
    let mut group = c.benchmark_group("rk4");
    group.sample_size(10);
    for n in SIZES {
        let (state, params) = fixture(n);
        group.bench_with_input(BenchmarkId::new("step", n), &state, |b, s| {
            b.iter(|| rk4_step(s, 1e-4, &params).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, transforms, operators, stepping);
criterion_main!(benches);
