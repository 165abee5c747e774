//! Convolution operations against naive-loop oracles, including the
//! random-parameterization sweeps and the adjointness identity.

mod common;

use common::{max_abs_diff, naive_conv2d, random_tensor, rng, OraclePad};
use mustgan_core::tensor::{PadMode, Tape, Tensor};



#[test]
fn conv2d_matches_naive_oracle_100_cases() {
    for seed in 0..100u64 {
        let diff = common::conv_oracle_case(seed);
        assert!(diff < 1e-6, "conv2d case {seed} differs by {diff}");
    }
}

#[test]
fn conv2d_transpose_matches_naive_oracle_100_cases() {
    for seed in 0..100u64 {
        let diff = common::convt_oracle_case(seed);
        assert!(diff < 1e-6, "conv2d_transpose case {seed} differs by {diff}");
    }
}

#[test]
fn strided_conv_against_oracle_spec_example() {
    // random 2x3x8x8 input, 4x3x3x3 kernel, stride 2, padding 1
    let mut r = rng(424242);
    let x = random_tensor::<f64>(&mut r, vec![2, 3, 8, 8]);
    let w = random_tensor::<f64>(&mut r, vec![4, 3, 3, 3]);
    let bias = random_tensor::<f64>(&mut r, vec![4]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = tape.constant(bias.clone());
    let y = tape.conv2d(xv, wv, bv, 2, 1, PadMode::Zero).unwrap();
    let expected = naive_conv2d(&x, &w, &bias, 2, 1, OraclePad::Zero);
    assert_eq!(tape.value(y).shape(), &[2, 4, 4, 4]);
    assert!(max_abs_diff(tape.value(y), &expected) < 1e-6);
}

/// conv2d_transpose is the adjoint of conv2d's linear map. Checked two
/// ways on a random 1x2x4x4 input with a shared kernel and zero biases:
/// the inner-product identity <convT(x), y> == <x, conv(y)>, and the
/// tape gradient of convT w.r.t. its input against a conv2d forward of
/// the upstream cotangent.
#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for seed in 0..20u64 {
        let mut r = rng(seed.wrapping_mul(77).wrapping_add(5));
        let (cin, cout, k, stride, padding) = (2, 3, 3, 2, 1);
        let (h, w) = (4, 4);
        let x = random_tensor::<f64>(&mut r, vec![1, cin, h, w]);
        // shared kernel: [cin, cout, k, k] for convT, read as
        // [Cout'=cin <- Cin'=cout] by the forward conv.
        let wt = random_tensor::<f64>(&mut r, vec![cin, cout, k, k]);
        let zb_cout = Tensor::zeros(vec![cout]).unwrap();
        let zb_cin = Tensor::zeros(vec![cin]).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.constant(wt.clone());
        let b1 = tape.constant(zb_cout.clone());
        let tx = tape.conv2d_transpose(xv, wv, b1, stride, padding).unwrap();
        let y = random_tensor::<f64>(&mut r, tape.value(tx).shape().to_vec());

        let lhs: f64 = tape
            .value(tx)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();

        let yv = tape.constant(y.clone());
        let b2 = tape.constant(zb_cin.clone());
        let cy = tape.conv2d(yv, wv, b2, stride, padding, PadMode::Zero).unwrap();
        assert_eq!(tape.value(cy).shape(), x.shape());
        let rhs: f64 = x
            .data()
            .iter()
            .zip(tape.value(cy).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!(
            (lhs - rhs).abs() < 1e-9,
            "adjoint identity failed at seed {seed}: {lhs} vs {rhs}"
        );

        // Gradient form: d<convT(x), y>/dx == conv2d(y) with the same kernel.
        let conv_of_y = tape.value(cy).clone();
        let yv2 = tape.constant(y.clone());
        let prod = tape.mul(tx, yv2).unwrap();
        let total = tape.mean(prod).unwrap();
        let n = y.numel() as f64;
        let grads = tape.backward(total).unwrap();
        let gx = grads.by_var(xv).unwrap();
        let scaled = conv_of_y.map(|v| v / n);
        assert!(
            max_abs_diff(gx, &scaled) < 1e-9,
            "convT input gradient differs from conv forward at seed {seed}"
        );
    }
}

/// Identical inputs produce bit-identical outputs whether kernels run on
/// the pool or in strict sequential mode: every output element uses a
/// fixed-order reduction, so scheduling never reorders arithmetic.
#[test]
fn parallel_and_sequential_agree_bitwise() {
    use mustgan_core::exec;
    let mut r = rng(9090);
    // large enough to take the parallel path
    let x = random_tensor::<f32>(&mut r, vec![2, 8, 40, 40]);
    let w = random_tensor::<f32>(&mut r, vec![16, 8, 3, 3]);
    let b = random_tensor::<f32>(&mut r, vec![16]);

    let run = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.leaf(w.clone(), true);
        let bv = tape.leaf(b.clone(), true);
        let y = tape.conv2d(xv, wv, bv, 1, 1, PadMode::Zero).unwrap();
        let loss = tape.mean(y).unwrap();
        let out = tape.value(y).to_vec();
        let grads = tape.backward(loss).unwrap();
        (out, grads.by_var(wv).unwrap().to_vec())
    };

    exec::set_sequential(true);
    let (seq_out, seq_gw) = run();
    exec::set_sequential(false);
    let (par_out, par_gw) = run();

    assert!(seq_out.iter().zip(&par_out).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(seq_gw.iter().zip(&par_gw).all(|(a, b)| a.to_bits() == b.to_bits()));
}
