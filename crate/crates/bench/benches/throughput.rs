use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use shelab::kernels::{cov_h, cov_z, TorusPoint};
use shelab::samplers::sample_fbm14;
use shelab::smallball::{estimate_splitting, Kernel};
use shelab::spde::{solve_u, NoiseArray, Scheme, Stepper};
use shelab::{CovKernel, RngStream, TimeGrid};
use shelab_bench::{light_splitting, small_query, spde_config};

fn circulant(c: &mut Criterion) {
    let mut g = c.benchmark_group("circulant_fbm14");
    for n in [257usize, 1025, 4097] {
        let grid = TimeGrid::uniform(1.0, n).unwrap();
        g.throughput(Throughput::Elements((64 * n) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &grid, |b, grid| {
            b.iter(|| sample_fbm14(grid, 64, RngStream::new(1, 0)).unwrap())
        });
    }
    g.finish();
}

fn splitting(c: &mut Criterion) {
    let mut g = c.benchmark_group("splitting_estimate");
    g.sample_size(10);
    for (name, kernel) in [("pcn", Kernel::Pcn), ("gibbs", Kernel::Gibbs)] {
        let cfg = light_splitting(kernel);
        let q = small_query(129);
        g.bench_function(name, |b| {
            b.iter(|| estimate_splitting(&q, &cfg, RngStream::new(2, 0)).unwrap())
        });
    }
    g.finish();
}

fn spde_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("spde_heat_step");
    for m in [128usize, 512] {
        for (name, scheme) in [
            ("semi_implicit", Scheme::SemiImplicit),
            ("explicit", Scheme::Explicit),
        ] {
            let cfg = spde_config(m, scheme);
            if cfg.validate().is_err() {
                continue;
            }
            let stepper = Stepper::new(&cfg).unwrap();
            let mut v: Vec<f64> = (0..m).map(|j| (j as f64).sin()).collect();
            let mut scratch = vec![0.0; m];
            g.throughput(Throughput::Elements(m as u64));
            g.bench_function(BenchmarkId::new(name, m), |b| {
                b.iter(|| stepper.heat_step(black_box(&mut v), &mut scratch))
            });
        }
    }
    g.finish();
    let cfg = spde_config(128, Scheme::SemiImplicit);
    let noise = NoiseArray::sample(&cfg, RngStream::new(3, 0));
    c.bench_function("spde_solve_u_128x100", |b| {
        b.iter(|| solve_u(&cfg, &noise).unwrap())
    });
}

fn kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernels");
    g.bench_function("cov_h", |b| {
        b.iter(|| cov_h(black_box(0.3), black_box(0.7)).unwrap())
    });
    let x = TorusPoint::new(0.0);
    g.bench_function("cov_z_1024_modes", |b| {
        b.iter(|| cov_z(black_box(0.3), black_box(0.7), x, x, 1024).unwrap())
    });
    let grid = TimeGrid::uniform(1.0, 65).unwrap();
    g.bench_function("h_matrix_65", |b| {
        b.iter(|| CovKernel::HFree.matrix(grid.points()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, circulant, splitting, spde_step, kernels);
criterion_main!(benches);
