use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use spinlab::defect::{DefectEvaluator, Window};
use spinlab::experiments::bound_point;
use spinlab::lattice::LatticeBox;
use spinlab::model::ModelSpec;
use spinlab::montecarlo::chain_rng;
use spinlab::par;
use spinlab::scaling::{scaling_grid, ScalingPoint};
use spinlab::spin::{DeformationProfile, SpinConfig};

const SAMPLES: usize = 256;

fn library_label() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential-build"
    }
}

fn defect_samples(c: &mut Criterion) {
    let mut group = c.benchmark_group("defect_samples");
    group.sample_size(10);
    for (d, s, l, a) in [(1usize, 1.5, 128u64, 16u64), (2, 3.0, 16, 4)] {
        let spec = ModelSpec::with_named_potential(d, 2, s, 1.0, 1.0, "nn", 1.0).unwrap();
        let id = format!("d{d}_L{l}");
        group.bench_with_input(BenchmarkId::new(library_label(), &id), &spec, |b, spec| {
            b.iter(|| black_box(bound_point(spec, l, a, 2, Window::Box(0), SAMPLES, 1, 0).unwrap().violations))
        });
        group.bench_with_input(BenchmarkId::new("sequential", &id), &spec, |b, spec| {
            let profile = DeformationProfile::new(d, l, a).unwrap();
            let region = LatticeBox::new(d, l + 3).region();
            b.iter(|| {
                let mut rng = chain_rng(1, 0);
                let mut ev = DefectEvaluator::new(&region, &profile, spec).unwrap();
                let mut total = 0.0;
                for _ in 0..SAMPLES {
                    let cfg = SpinConfig::random(region.clone(), 2, &mut rng).unwrap();
                    total += ev.evaluate(&cfg).unwrap();
                }
                black_box(total)
            })
        });
    }
    group.finish();
}

fn scaling_points(c: &mut Criterion) {
    let mut group = c.benchmark_group("scaling_grid");
    group.sample_size(10);
    let points: Vec<(u64, u64)> = [64u64, 128, 256, 512, 1024, 2048].iter().map(|&l| (l, l / 16)).collect();
    group.bench_function(library_label(), |b| b.iter(|| black_box(scaling_grid(1, 2.5, &points).unwrap().len())));
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(points.iter().map(|&(l, a)| ScalingPoint::compute(1, 2.5, l, a).unwrap()).count()))
    });
    group.finish();
}

criterion_group!(benches, defect_samples, scaling_points);
criterion_main!(benches);
