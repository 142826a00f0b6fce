//! Rayon pool against a single-threaded pool on the data-parallel paths.
//!
//! Build with `--no-default-features` to time the sequential fallback
//! instead; both variants then run the same code.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use neuroloc::data::{synth_scene, Config};
use neuroloc::tensor::Matrix;
use neuroloc::train::training_grid;
use neuroloc::{parallel, NeuroLoc};

fn config() -> Config {
    Config {
        input_dim: 32,
        feature_dim: 256,
        bins: 8,
        bin_features: 32,
        grids: 8,
        encoder_hidden: vec![64],
        samples: 400,
        ..Config::default()
    }
}

#[cfg(feature = "parallel")]
fn pools() -> Vec<rayon::ThreadPool> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    [1, threads]
        .into_iter()
        .map(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap())
        .collect()
}

fn run_in<R: Send>(variant: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        thread_local! {
            static POOLS: Vec<rayon::ThreadPool> = pools();
        }
        POOLS.with(|p| p[variant].install(f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = variant;
        f()
    }
}

const VARIANTS: [&str; 2] = ["1-thread", "default"];

fn bench_predict(c: &mut Criterion) {
    let cfg = config();
    let data = synth_scene(&cfg.scene());
    let mut model = NeuroLoc::new(&cfg, Some(training_grid(&cfg, &data.train).unwrap())).unwrap();
    model.rebuild_memory(&data.train).unwrap();
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    for (i, name) in VARIANTS.iter().enumerate() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &i, |b, &i| {
            b.iter(|| run_in(i, || black_box(model.predict_samples(&data.test).unwrap())))
        });
    }
    group.finish();
}

fn bench_model_init_sweep(c: &mut Criterion) {
    let cfg = config();
    let data = synth_scene(&cfg.scene());
    let grid = training_grid(&cfg, &data.train).unwrap();
    let seeds: Vec<u64> = (0..8).collect();
    let mut group = c.benchmark_group("seed_sweep_init");
    group.sample_size(10);
    for (i, name) in VARIANTS.iter().enumerate() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &i, |b, &i| {
            b.iter(|| {
                run_in(i, || {
                    parallel::map(&seeds, |&seed| {
                        let c = Config { seed, ..cfg.clone() };
                        NeuroLoc::new(&c, Some(grid))
                            .unwrap()
                            .param("head.position.weight")
                            .unwrap()
                            .value
                            .sum()
                    })
                })
            })
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Matrix::random_normal(256, 256, 1.0, &mut rng);
    let b = Matrix::random_normal(256, 256, 1.0, &mut rng);
    let mut group = c.benchmark_group("matmul_256");
    for (i, name) in VARIANTS.iter().enumerate() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &i, |bench, &i| {
            bench.iter(|| run_in(i, || black_box(a.matmul(&b).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_predict, bench_model_init_sweep, bench_matmul);
criterion_main!(benches);
