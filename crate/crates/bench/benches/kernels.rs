use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use locodl::algorithms::{default_params, Locodl, LocodlState};
use locodl::compressors::{CompressorKind, CompressorSpec};
use locodl::harness::{prepare, ProblemSource, ProblemSpec, SharedMode};
use locodl::rng::SeedTree;

fn compress(c: &mut Criterion) {
    let d = 1024;
    let x: Vec<f64> = (0..d).map(|j| ((j * 37 % 101) as f64 - 50.0) / 7.0).collect();
    let mut out = vec![0.0; d];
    let mut group = c.benchmark_group("compress");
    group.throughput(Throughput::Elements(d as u64));
    let kinds = [
        CompressorKind::Identity,
        CompressorKind::RandK { k: 16 },
        CompressorKind::Natural,
        CompressorKind::RandKNatural { k: 16 },
        CompressorKind::L1Selection,
    ];
    for kind in kinds {
        let spec = CompressorSpec::new(kind, d).unwrap();
        group.bench_function(BenchmarkId::from_parameter(spec.to_string()), |b| {
            let mut rng = SeedTree::rng(7);
            b.iter(|| spec.compress_into(black_box(&x), &mut out, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn adult_spec() -> ProblemSpec {
    ProblemSpec {
        source: ProblemSource::AdultLike { rows: 6414 },
        clients: 87,
        kappa: 1e4,
        data_seed: 0,
        shared: SharedMode::Ridge,
    }
}

fn logistic_gradient(c: &mut Criterion) {
    let prepared = prepare(&adult_spec(), 1e-10).unwrap();
    let f = prepared.problem.local(0);
    let x = vec![0.1; prepared.problem.dim()];
    let mut out = vec![0.0; x.len()];
    c.bench_function("logistic_gradient/adult_client", |b| b.iter(|| f.gradient_into(black_box(&x), &mut out)));
}

fn locodl_step(c: &mut Criterion) {
    let prepared = prepare(&adult_spec(), 1e-10).unwrap();
    let problem = &prepared.problem;
    let (n, d) = (problem.clients(), problem.dim());
    let spec = CompressorSpec::new(CompressorKind::RandKNatural { k: 2 }, d).unwrap();
    let specs = vec![spec; n];
    let params = default_params(problem.smoothness(), problem.strong_convexity(), &spec, n);
    let algo = Locodl::new(problem, &specs, params).unwrap();
    let seeds = SeedTree::new(3);
    let mut group = c.benchmark_group("locodl_step");
    for (label, coin) in [("local", false), ("round", true)] {
        let mut state = LocodlState::zeros(n, d);
        group.bench_function(label, |b| b.iter(|| algo.step_with_coin(&mut state, coin, None, &seeds).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, compress, logistic_gradient, locodl_step);
criterion_main!(benches);
