//! Data-parallel paths against a single worker. Built without the `parallel`
//! feature only the sequential variant runs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use motif_search::eval::benchmark::{generate_benchmark, BenchmarkSpec};
use motif_search::features::{FeaturePipeline, PreprocessConfig, StyleTemplate};
use motif_search::index::{kmeans, IndexParams, IvfPqIndex, PatchRef};
use motif_search::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn variants() -> Vec<(&'static str, usize)> {
    if cfg!(feature = "parallel") {
        vec![("parallel", par::threads()), ("one-thread", 1)]
    } else {
        vec![("sequential", 1)]
    }
}

fn random_data(n: usize, d: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn bench_search(c: &mut Criterion) {
    let (n, d) = (40_000, 48);
    let data = random_data(n, d, 1);
    let queries = random_data(64, d, 2);
    let refs: Vec<PatchRef> = (0..n)
        .map(|i| PatchRef {
            image_id: (i / 200) as u32,
            patch_id: (i % 200) as u32,
            rect: [0.0, 0.0, 16.0, 16.0],
            scale: 0,
        })
        .collect();
    let params = IndexParams {
        kmeans_iters: 8,
        ..IndexParams::desk()
    };
    let mut index = IvfPqIndex::train(&data, d, &params, 3).unwrap();
    index.add(&refs, &data).unwrap();
    let mut g = c.benchmark_group("ivfpq_search_64q");
    for (name, threads) in variants() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::with_threads(threads, || {
                b.iter(|| index.search(&queries, 100, 32).unwrap())
            })
        });
    }
    g.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let data = random_data(20_000, 48, 4);
    let mut g = c.benchmark_group("kmeans_k256_5iters");
    g.sample_size(10);
    for (name, threads) in variants() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::with_threads(threads, || b.iter(|| kmeans(&data, 48, 256, 5, 9).unwrap()))
        });
    }
    g.finish();
}

fn bench_features(c: &mut Criterion) {
    let bench = generate_benchmark(&BenchmarkSpec {
        num_images: 4,
        num_motifs: 1,
        instances_per_motif: 2,
        num_distractors: 0,
        ..BenchmarkSpec::default()
    })
    .unwrap();
    let mut pipeline = FeaturePipeline::toy(PreprocessConfig::default());
    pipeline.templates = (1..4)
        .map(|i| StyleTemplate::from_image(i, &bench.images[i as usize]))
        .collect();
    let img = &bench.images[0];
    let mut g = c.benchmark_group("fused_features_256px");
    g.sample_size(10);
    for (name, threads) in variants() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::with_threads(threads, || b.iter(|| pipeline.features(img).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_search, bench_kmeans, bench_features);
criterion_main!(benches);
