use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gef_bench::fixture;
use gef_core::neighborhood::neighborhood_entropies;
use gef_core::ray_oracle::ray_entropy;
use std::hint::black_box;

fn entropy_paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("entropy_paths");
    group.sample_size(10);
    for &p in &[2_000usize, 20_000] {
        let f = fixture(p, 100, 128, 50);
        group.bench_with_input(BenchmarkId::new("neighborhood", p), &f, |b, f| {
            b.iter(|| neighborhood_entropies(black_box(&f.scene.opacities()), &f.graph).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("ray_oracle_100_rays", p), &f, |b, f| {
            b.iter(|| {
                f.rays
                    .iter()
                    .map(|r| ray_entropy(black_box(&f.scene), r, f.params.samples).unwrap_or(0.0))
                    .sum::<f64>()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, entropy_paths);
criterion_main!(benches);
