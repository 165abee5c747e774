use criterion::{black_box, criterion_group, criterion_main, Criterion};

use mustgan_bench::{desk_model, image};
use mustgan_core::metrics::{psnr, ssim};
use mustgan_core::nn::from_model_range;

fn forwards(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    g.sample_size(20);

    let model = desk_model(4);
    let sources = vec![image(1, 64), image(2, 64)];
    g.bench_function("synthesize_desk_64px_i4", |bench| {
        bench.iter(|| black_box(model.synthesize(&sources).unwrap()))
    });

    let late = desk_model(8);
    g.bench_function("synthesize_desk_64px_i8", |bench| {
        bench.iter(|| black_box(late.synthesize(&sources).unwrap()))
    });

    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut g = c.benchmark_group("metrics");
    let reference = from_model_range(&image(3, 64));
    let candidate = from_model_range(&image(4, 64));
    g.bench_function("psnr_64px", |bench| {
        bench.iter(|| black_box(psnr(&reference, &candidate).unwrap()))
    });
    g.bench_function("ssim_64px", |bench| {
        bench.iter(|| black_box(ssim(&reference, &candidate).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, forwards, metrics);
criterion_main!(benches);
