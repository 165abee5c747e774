//! Shared fixtures for the criterion benchmarks.

use mustgan_core::model::{FusionConfig, MultiStreamModel};
use mustgan_core::nn::GeneratorSpec;
use mustgan_core::tensor::Tensor;

/// Generator profile used by the desk-scale benchmarks.
pub fn desk_spec() -> GeneratorSpec {
    GeneratorSpec {
        n_enc: 3,
        n_res: 4,
        n_dec: 3,
        base_channels: 16,
        in_channels: 1,
        out_channels: 1,
    }
}

pub fn desk_model(fusion_i: usize) -> MultiStreamModel<f32> {
    MultiStreamModel::assemble(2, desk_spec(), FusionConfig::new(fusion_i, 2), 42).unwrap()
}

pub fn image(seed: usize, size: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![1, 1, size, size], |i| {
        (((i * 31 + seed * 7) % 97) as f32 / 97.0) - 0.5
    })
    .unwrap()
}
