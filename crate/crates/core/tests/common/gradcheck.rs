//! Finite-difference check harness shared by the gradient tests and the
//! acceptance suite. Each case describes how to build a scalar loss from
//! input tensors; the harness differentiates it once analytically and then
//! against central differences per input coordinate.

#![allow(dead_code)]

use mustgan_core::tensor::{ActKind, Element, PadMode, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{fd_max_rel_err, rng};

/// Builds the graph for one case: registers the inputs (the first
/// `n_grad` of them with gradients enabled) and returns their leaf vars
/// plus the scalar loss var.
type BuildFn<E> = Box<dyn Fn(&[Tensor<E>], &mut Tape<E>) -> (Vec<Var>, Var)>;

pub struct OpCase<E: Element> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<E>>,
    pub n_grad: usize,
    pub build: BuildFn<E>,
}

impl<E: Element> OpCase<E> {
    fn loss_value(&self, inputs: &[Tensor<E>]) -> f64 {
        let mut tape = Tape::new();
        let (_, loss) = (self.build)(inputs, &mut tape);
        tape.value(loss).item().unwrap().to_f64()
    }
}

/// Random tensor bounded away from zero by `margin` (kink avoidance for
/// relu-style ops and the l1 sign).
fn random_off_zero<E: Element>(r: &mut ChaCha8Rng, shape: Vec<usize>, margin: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| {
        let mag = r.gen_range(margin..1.0);
        let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        E::from_f64(sign * mag)
    })
    .unwrap()
}

fn random_t<E: Element>(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::from_f64(r.gen_range(-1.0..1.0))).unwrap()
}

fn leaves<E: Element>(tape: &mut Tape<E>, inputs: &[Tensor<E>], n_grad: usize) -> Vec<Var> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), i < n_grad))
        .collect()
}

/// One randomized case per op; `seed` varies shapes and values.
pub fn op_cases<E: Element>(seed: u64) -> Vec<OpCase<E>> {
    let mut r = rng(seed.wrapping_mul(0x9e3779b9).wrapping_add(17));
    let mut cases: Vec<OpCase<E>> = Vec::new();

    // conv2d, both padding modes, stride 1..2
    {
        let (b, cin, cout) = (1 + seed as usize % 2, 1 + r.gen_range(0..3), 1 + r.gen_range(0..3));
        let k = 1 + r.gen_range(0..3);
        let stride = 1 + r.gen_range(0..2);
        let h = k + r.gen_range(2..6);
        let w = k + r.gen_range(2..6);
        let padding = r.gen_range(0..=1.min(h - 1).min(k));
        let mode = if r.gen_bool(0.5) { PadMode::Reflect } else { PadMode::Zero };
        let x = random_t::<E>(&mut r, vec![b, cin, h, w]);
        let wt = random_t::<E>(&mut r, vec![cout, cin, k, k]);
        let bias = random_t::<E>(&mut r, vec![cout]);
        cases.push(OpCase {
            name: "conv2d",
            inputs: vec![x, wt, bias],
            n_grad: 3,
            build: Box::new(move |ins, t| {
                let vs = leaves(t, ins, 3);
                let y = t.conv2d(vs[0], vs[1], vs[2], stride, padding, mode).unwrap();
                let loss = t.mean(y).unwrap();
                (vs, loss)
            }),
        });
    }

    // conv2d_transpose
    {
        let (cin, cout) = (1 + r.gen_range(0..3), 1 + r.gen_range(0..3));
        let k = 2 + r.gen_range(0..3);
        let stride = 1 + r.gen_range(0..2);
        let padding = r.gen_range(0..=(k - 1) / 2);
        let h = 2 + r.gen_range(0..4);
        let x = random_t::<E>(&mut r, vec![1, cin, h, h]);
        let wt = random_t::<E>(&mut r, vec![cin, cout, k, k]);
        let bias = random_t::<E>(&mut r, vec![cout]);
        cases.push(OpCase {
            name: "conv2d_transpose",
            inputs: vec![x, wt, bias],
            n_grad: 3,
            build: Box::new(move |ins, t| {
                let vs = leaves(t, ins, 3);
                let y = t.conv2d_transpose(vs[0], vs[1], vs[2], stride, padding).unwrap();
                let loss = t.sq_err_to(y, 0.25).unwrap();
                (vs, loss)
            }),
        });
    }

    // instance_norm
    {
        let (b, c) = (1 + r.gen_range(0..2), 1 + r.gen_range(0..3));
        let h = 2 + r.gen_range(0..4);
        let w = 2 + r.gen_range(0..4);
        let x = random_t::<E>(&mut r, vec![b, c, h, w]);
        cases.push(OpCase {
            name: "instance_norm",
            inputs: vec![x],
            n_grad: 1,
            build: Box::new(|ins, t| {
                let vs = leaves(t, ins, 1);
                let y = t.instance_norm(vs[0], 1e-3).unwrap();
                let loss = t.sq_err_to(y, 0.5).unwrap();
                (vs, loss)
            }),
        });
    }

    // activations; inputs bounded away from the relu kink
    for kind in [
        ActKind::Relu,
        ActKind::LeakyRelu(0.2),
        ActKind::Tanh,
        ActKind::Sigmoid,
    ] {
        let name = match kind {
            ActKind::Relu => "relu",
            ActKind::LeakyRelu(_) => "leaky_relu",
            ActKind::Tanh => "tanh",
            ActKind::Sigmoid => "sigmoid",
        };
        let x = random_off_zero::<E>(&mut r, vec![2, 3, 4], 0.08);
        cases.push(OpCase {
            name,
            inputs: vec![x],
            n_grad: 1,
            build: Box::new(move |ins, t| {
                let vs = leaves(t, ins, 1);
                let y = t.activation(vs[0], kind).unwrap();
                let loss = t.sq_err_to(y, 0.3).unwrap();
                (vs, loss)
            }),
        });
    }

    // concat_channels with three inputs
    {
        let (h, w) = (2 + r.gen_range(0..3), 2 + r.gen_range(0..3));
        let (ca, cb, cc) = (1 + r.gen_range(0..2), 1 + r.gen_range(0..2), 1 + r.gen_range(0..2));
        let a = random_t::<E>(&mut r, vec![1, ca, h, w]);
        let b = random_t::<E>(&mut r, vec![1, cb, h, w]);
        let c = random_t::<E>(&mut r, vec![1, cc, h, w]);
        cases.push(OpCase {
            name: "concat_channels",
            inputs: vec![a, b, c],
            n_grad: 3,
            build: Box::new(|ins, t| {
                let vs = leaves(t, ins, 3);
                let cat = t.concat_channels(&vs).unwrap();
                let loss = t.sq_err_to(cat, -0.1).unwrap();
                (vs, loss)
            }),
        });
    }

    // add, mul, affine chained (a used twice: accumulation path)
    {
        let shape = vec![2, 5];
        let a = random_t::<E>(&mut r, shape.clone());
        let b = random_t::<E>(&mut r, shape.clone());
        cases.push(OpCase {
            name: "add_mul_affine",
            inputs: vec![a, b],
            n_grad: 2,
            build: Box::new(|ins, t| {
                let vs = leaves(t, ins, 2);
                let s = t.add(vs[0], vs[1]).unwrap();
                let p = t.mul(s, vs[0]).unwrap();
                let f = t.affine(p, 0.7, -0.2).unwrap();
                let loss = t.mean(f).unwrap();
                (vs, loss)
            }),
        });
    }

    // clamp + ln (the squashed-log path); inputs inside (0.15, 0.85)
    {
        let x = Tensor::from_fn(vec![3, 3], |_| E::from_f64(r.gen_range(0.15..0.85))).unwrap();
        cases.push(OpCase {
            name: "clamp_ln",
            inputs: vec![x],
            n_grad: 1,
            build: Box::new(|ins, t| {
                let vs = leaves(t, ins, 1);
                let c = t.clamp(vs[0], 1e-7, 1.0 - 1e-7).unwrap();
                let l = t.ln(c).unwrap();
                let m = t.mean(l).unwrap();
                let loss = t.affine(m, -1.0, 0.0).unwrap();
                (vs, loss)
            }),
        });
    }

    // mean / l1_to / sq_err_to; l1 arguments kept off ties
    {
        let x = random_t::<E>(&mut r, vec![2, 4]);
        let off = random_off_zero::<E>(&mut r, vec![2, 4], 0.1);
        let tgt = Tensor::from_fn(vec![2, 4], |i| {
            E::from_f64(x.data()[i].to_f64() + off.data()[i].to_f64())
        })
        .unwrap();
        cases.push(OpCase {
            name: "reduces",
            inputs: vec![x, tgt],
            n_grad: 2,
            build: Box::new(|ins, t| {
                let vs = leaves(t, ins, 2);
                let l1 = t.l1_to(vs[0], vs[1]).unwrap();
                let m = t.mean(vs[0]).unwrap();
                let se = t.sq_err_to(vs[0], 0.4).unwrap();
                let s1 = t.add(l1, m).unwrap();
                let loss = t.add(s1, se).unwrap();
                (vs, loss)
            }),
        });
    }

    // slice_channels
    {
        let c = 3 + r.gen_range(0..3);
        let x = random_t::<E>(&mut r, vec![1, c, 3, 3]);
        let start = r.gen_range(0..c - 1);
        let len = 1 + r.gen_range(0..(c - start - 1).max(1));
        cases.push(OpCase {
            name: "slice_channels",
            inputs: vec![x],
            n_grad: 1,
            build: Box::new(move |ins, t| {
                let vs = leaves(t, ins, 1);
                let s = t.slice_channels(vs[0], start, len).unwrap();
                let loss = t.sq_err_to(s, 0.2).unwrap();
                (vs, loss)
            }),
        });
    }

    cases
}

/// Checks one case; returns the worst relative error across the
/// differentiated inputs.
pub fn check_case<E: Element>(case: &OpCase<E>, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let (vars, loss) = (case.build)(&case.inputs, &mut tape);
    let grads = tape.backward(loss).unwrap();

    let loss_fn = |ins: &[Tensor<E>]| case.loss_value(ins);
    let mut r = rng(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for arg in 0..case.n_grad {
        let g = grads
            .by_var(vars[arg])
            .unwrap_or_else(|| panic!("{}: no gradient for input {arg}", case.name));
        let err = fd_max_rel_err(&loss_fn, &case.inputs, arg, g, 24, &mut r);
        worst = worst.max(err);
    }
    worst
}

/// Worst relative error per op name over `n_cases` randomized cases.
pub fn run_op_suite<E: Element>(n_cases: u64) -> Vec<(&'static str, f64)> {
    let mut worst: std::collections::BTreeMap<&'static str, f64> = Default::default();
    for seed in 0..n_cases {
        for case in op_cases::<E>(seed) {
            let err = check_case(&case, seed);
            let e = worst.entry(case.name).or_insert(0.0);
            *e = e.max(err);
        }
    }
    worst.into_iter().collect()
}
