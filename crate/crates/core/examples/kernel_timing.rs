//! Rough per-kernel timings at the desk-study layer shapes.
//! Run: cargo run --release -p mustgan-core --example kernel_timing

use std::time::Instant;

use mustgan_core::model::{FusionConfig, MultiStreamModel};
use mustgan_core::nn::GeneratorSpec;
use mustgan_core::tensor::{kernels_bench as kb, Tensor};
use mustgan_core::train::{train_streams, TrainConfig, TrainSample};

fn time<F: FnMut()>(label: &str, iters: usize, mut f: F) {
    let t0 = Instant::now();
    for _ in 0..iters {
        f();
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("{label:<44} {:>9.3} ms", dt * 1e3);
}

fn main() {
    let x = |n: usize| -> Vec<f32> { (0..n).map(|i| (i as f32 * 0.37).sin()).collect() };

    // residual-block conv: 64ch 16x16, 3x3 (the dominant cost)
    let xin = x(64 * 18 * 18);
    let w = x(64 * 64 * 9);
    let b = x(64);
    time("conv2d fwd 64->64 3x3 @16^2 (padded 18)", 200, || {
        let _ = kb::conv2d_fwd(&xin, (1, 64, 18, 18), &w, (64, 3, 3), &b, 1);
    });
    let dout = x(64 * 16 * 16);
    time("conv2d bwd 64->64 3x3 @16^2", 100, || {
        let _ = kb::conv2d_bwd(
            &xin,
            (1, 64, 18, 18),
            &w,
            (64, 3, 3),
            1,
            &dout,
            (16, 16),
            true,
            true,
            true,
        );
    });

    // encoder conv 7x7 1->16 @64^2 (padded 70)
    let xin7 = x(70 * 70);
    let w7 = x(16 * 49);
    let b7 = x(16);
    time("conv2d fwd 1->16 7x7 @64^2", 100, || {
        let _ = kb::conv2d_fwd(&xin7, (1, 1, 70, 70), &w7, (16, 7, 7), &b7, 1);
    });

    // transpose conv 64->32 4x4 s2 @16^2 -> 32^2
    let xt = x(64 * 16 * 16);
    let wt = x(64 * 32 * 16);
    let bt = x(32);
    time("convT fwd 64->32 4x4 s2 @16^2", 200, || {
        let _ = kb::convt2d_fwd(&xt, (1, 64, 16, 16), &wt, (32, 4, 4), &bt, 2, 1);
    });
    let dt_out = x(32 * 32 * 32);
    time("convT bwd 64->32 4x4 s2 @16^2", 100, || {
        let _ = kb::convt2d_bwd(
            &xt,
            (1, 64, 16, 16),
            &wt,
            (32, 4, 4),
            2,
            1,
            &dt_out,
            (32, 32),
            true,
            true,
            true,
        );
    });

    // discriminator conv 4x4 s1 64->128 @8^2 (the widest disc layer)
    let xd = x(64 * 11 * 11);
    let wd = x(128 * 64 * 16);
    let bd = x(128);
    time("conv2d fwd 64->128 4x4 s1 @8^2", 200, || {
        let _ = kb::conv2d_fwd(&xd, (1, 64, 11, 11), &wd, (128, 4, 4), &bd, 1);
    });

    // one full stream training step at desk scale
    let spec = GeneratorSpec {
        base_channels: 16,
        n_res: 4,
        ..GeneratorSpec::default()
    };
    let mut model = MultiStreamModel::<f32>::assemble(2, spec, FusionConfig::new(4, 2), 1).unwrap();
    let data: Vec<TrainSample<f32>> = (0..4)
        .map(|s| {
            let a =
                Tensor::from_fn(vec![1, 1, 64, 64], |j| ((j + s) % 17) as f32 / 17.0 - 0.5).unwrap();
            let b = a.map(|v| -v);
            let t = a.map(|v| v * 0.7);
            TrainSample {
                sources: vec![a, b],
                target: t,
            }
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    train_streams(&mut model, &data, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{:<44} {:>9.3} ms",
        "full phase-1 step, 3 streams x 4 samples",
        dt * 1e3
    );
    println!(
        "{:<44} {:>9.3} ms",
        "  per stream-sample",
        dt * 1e3 / 12.0
    );
}
