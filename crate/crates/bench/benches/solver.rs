use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jko_bench::step_fixture;
use jko_core::driver::lookup;
use jko_core::linalg::KktSolver;
use jko_core::sqp_step;

fn kkt_factorization(c: &mut Criterion) {
    let mut group = c.benchmark_group("kkt_factor");
    group.sample_size(10);
    for (preset, nx) in [("heat1d", 400), ("ring2d", 20), ("ring2d", 40)] {
        let (p, u) = step_fixture(preset, nx).unwrap();
        let h = p.hessian(&u).unwrap();
        let a = p.constraints().a;
        let diag = vec![1.0; h.rows()];
        let mut solver = KktSolver::new(&h, &a, None).unwrap();
        group.bench_with_input(BenchmarkId::new(preset, nx), &nx, |b, _| {
            b.iter(|| solver.factor(&h, &a, Some(&diag), 0.0, 0.0).unwrap())
        });
    }
    group.finish();
}

fn sqp_single_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("sqp_step");
    group.sample_size(10);
    for (preset, nx) in [("heat1d", 99), ("nfp1d", 200), ("aggdrift2d", 20)] {
        let params = lookup(preset).unwrap().sqp;
        let (p, u) = step_fixture(preset, nx).unwrap();
        group.bench_with_input(BenchmarkId::new(preset, nx), &nx, |b, _| {
            b.iter(|| sqp_step(&p, &params, &u).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kkt_factorization, sqp_single_step);
criterion_main!(benches);
