use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tcr_core::dataset::{generate_dataset, GenerateOptions, Split};
use tcr_core::geometry::{OperatorCache, RadonOperator, ScanGeometry};
use tcr_core::phantom::{NoiseScale, PhantomConfig};
use tcr_nn::par;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn options(count: usize) -> GenerateOptions {
    GenerateOptions {
        split: Split::Train,
        count,
        seed: 0,
        phantom: PhantomConfig { n_steps: 4, size: 32, ..PhantomConfig::default() },
        geometry: ScanGeometry::rotating(32, 4, 20, 3),
        noise_level: 0.0,
        noise_scale: NoiseScale::Peak,
    }
}

fn radon(c: &mut Criterion) {
    let mut group = c.benchmark_group("radon_64px_90_angles");
    let angles: Vec<f64> = (0..90).map(|k| k as f64 * std::f64::consts::PI / 90.0).collect();
    let offsets = tcr_core::geometry::linspace(-1.0, 1.0, 100);
    let img = vec![0.5; 64 * 64];
    for (name, seq) in modes() {
        par::force_sequential(seq);
        group.bench_function(BenchmarkId::new("assemble", name), |b| b.iter(|| RadonOperator::new(64, &angles, &offsets).unwrap()));
        let op = RadonOperator::new(64, &angles, &offsets).unwrap();
        let sino = op.project(&img).unwrap();
        group.bench_function(BenchmarkId::new("project", name), |b| b.iter(|| op.project(&img).unwrap()));
        group.bench_function(BenchmarkId::new("fbp", name), |b| b.iter(|| op.fbp(&sino).unwrap()));
    }
    par::force_sequential(false);
    group.finish();
}

fn datasets(c: &mut Criterion) {
    let mut group = c.benchmark_group("dataset_8_sequences");
    group.sample_size(10);
    for (name, seq) in modes() {
        par::force_sequential(seq);
        group.bench_function(BenchmarkId::new("generate", name), |b| b.iter(|| generate_dataset(&options(8)).unwrap()));
        let ds = generate_dataset(&options(8)).unwrap();
        group.bench_function(BenchmarkId::new("landweber_initials", name), |b| {
            b.iter(|| tcr_core::train::prepare_training_set(&ds, &OperatorCache::new(), 50).unwrap())
        });
    }
    par::force_sequential(false);
    group.finish();
}

criterion_group!(benches, radon, datasets);
criterion_main!(benches);
