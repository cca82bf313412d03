//! Same workloads under the global rayon pool and under a one-thread pool.
//! Build with `--no-default-features` to time the plain sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use statrefine::data::gen_synthetic_dataset;
use statrefine::denoise::median_filter;
use statrefine::nets::{Arch, FinalInit, Net};
use statrefine::tensor::Tensor;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn pools() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    vec![
        ("pool", None),
        ("one-thread", Some(rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())),
    ]
}

fn run<R>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn bench(c: &mut Criterion) {
    let images = gen_synthetic_dataset(8, 64, 1).unwrap();
    let refiner: Net<f32> = Net::init(
        Arch::Refiner {
            depth: 4,
            width: 16,
            heads: 4,
        },
        2,
        FinalInit::Small,
    )
    .unwrap();
    let g: Net<f32> = Net::init(Arch::Consistency { width: 16 }, 3, FinalInit::Small).unwrap();
    let input = Tensor::<f32>::from_fn(&[4, 1, 64, 64], |i| ((i * 37) % 255) as f32 / 255.0);
    let other = Tensor::<f32>::from_fn(&[4, 1, 64, 64], |i| ((i * 11) % 255) as f32 / 255.0);

    let mut group = c.benchmark_group("parallel_vs_sequential");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("median_filter", name), &images, |b, imgs| {
            b.iter(|| run(&pool, || imgs.iter().map(|im| median_filter(im, 3).unwrap()).count()))
        });
        group.bench_with_input(BenchmarkId::new("refiner_forward", name), &input, |b, x| {
            b.iter(|| run(&pool, || refiner.eval(x).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("pixel_mlp", name), &input, |b, x| {
            b.iter(|| run(&pool, || g.eval_pair(x, &other).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
