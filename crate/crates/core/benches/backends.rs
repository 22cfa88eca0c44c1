use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use regnoise::fields::{make_drift, DriftParams};
use regnoise::flow::{build_flow, Bands, FlowSpec, Lattice};
use regnoise::paths::generate_path;
use regnoise::sewing::Scheme;
use regnoise::verify::{mc_krylov_moment, Ensemble};
use regnoise::Backend;

const BACKENDS: [(&str, Backend); 2] = [("sequential", Backend::Sequential), ("parallel", Backend::Parallel)];

fn flows(c: &mut Criterion) {
    let b = make_drift("sign", &DriftParams { sigma: Some(1.0 / 64.0), ..Default::default() }).unwrap();
    let path = generate_path(1, 1.0, 12, 1).unwrap();
    let spec = FlowSpec {
        level: 12,
        time_level: 6,
        start_level: 3,
        lattice: Lattice::symmetric(1.0, 5).unwrap(),
        bands: Bands::Full,
        scheme: Scheme::NonlinearYoung,
    };
    let mut g = c.benchmark_group("build_flow");
    g.sample_size(10);
    for (name, backend) in BACKENDS {
        g.bench_with_input(BenchmarkId::from_parameter(name), &backend, |bench, &backend| {
            bench.iter(|| build_flow(black_box(&b), &path, &spec, backend).unwrap())
        });
    }
    g.finish();
}

fn moments(c: &mut Criterion) {
    let f = make_drift("gaussian_bump", &DriftParams { width: Some(1.0 / 256.0), ..Default::default() }).unwrap();
    let intervals: Vec<(f64, f64)> = (3..=10).map(|k| (0.0, 2f64.powi(-k))).collect();
    let ensemble = Ensemble {
        paths: 256,
        level: 12,
        horizon: 0.125,
        master_seed: 1,
    };
    let mut g = c.benchmark_group("mc_krylov_moment");
    g.sample_size(10);
    for (name, backend) in BACKENDS {
        g.bench_with_input(BenchmarkId::from_parameter(name), &backend, |bench, &backend| {
            bench.iter(|| mc_krylov_moment(black_box(&f), &[1.0], &intervals, &ensemble, backend).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, flows, moments);
criterion_main!(benches);
