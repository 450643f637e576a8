//! Parallel against sequential operator application over macro elements.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hhg_core::coefficients::Coefficient;
use hhg_core::mesh::{MacroMesh, RefinedGrid};
use hhg_core::operators::{Operator, Variant};

fn bench_apply(c: &mut Criterion) {
    let level = std::env::var("HHG_BENCH_LEVEL").ok().and_then(|s| s.parse().ok()).unwrap_or(5);
    let grid = Arc::new(RefinedGrid::new(Arc::new(MacroMesh::unit_cube_12()), level));
    let coef = Coefficient::Cos3d { m: 3.0 };
    let u: Vec<f64> = (0..grid.num_slots()).map(|s| grid.slot_point(s).iter().sum::<f64>().sin()).collect();
    let f = vec![1.0; grid.num_slots()];
    let mut out = vec![0.0; grid.num_slots()];

    let mut g = c.benchmark_group("apply");
    g.sample_size(10);
    g.throughput(Throughput::Elements(grid.num_slots() as u64));
    for v in [Variant::Constant, Variant::Scaling, Variant::NodalFly] {
        let mut op = Operator::new(grid.clone(), &coef, v.clone()).unwrap();
        for parallel in [false, true] {
            op.set_parallel(parallel);
            let mode = if parallel { "parallel" } else { "sequential" };
            g.bench_with_input(BenchmarkId::new(format!("{}/{mode}", v.name()), level), &level, |b, _| {
                b.iter(|| op.apply_into(&u, &mut out))
            });
            g.bench_with_input(BenchmarkId::new(format!("{}/residual_volume/{mode}", v.name()), level), &level, |b, _| {
                b.iter(|| op.residual_volume(&u, &f, &mut out))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, bench_apply);
criterion_main!(benches);
