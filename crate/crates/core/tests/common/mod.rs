//! Shared test oracles, independent of the library's compute paths.
//!
//! - naive seven-nested-loop convolution and scatter-add transposed
//!   convolution (direct definitions, no im2col / matmul / tape),
//! - a central finite-difference gradient checker,
//! - a scalar reference trace for the Adam update.

#![allow(dead_code)]

pub mod gradcheck;

use mustgan_core::tensor::{Element, PadMode, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Padding behaviour mirrored from the library's contract.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum OraclePad {
    Zero,
    Reflect,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    r as usize
}

/// Reads a padded input coordinate, applying the padding rule.
fn read_padded<E: Element>(
    x: &[E],
    (_c, h, w): (usize, usize, usize),
    ci: usize,
    iy: isize,
    ix: isize,
    pad: OraclePad,
) -> E {
    match pad {
        OraclePad::Zero => {
            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                E::zero()
            } else {
                x[ci * h * w + iy as usize * w + ix as usize]
            }
        }
        OraclePad::Reflect => x[ci * h * w + reflect(iy, h) * w + reflect(ix, w)],
    }
}

/// Direct convolution: out[b,co,oy,ox] = bias[co] +
/// sum over ci,ky,kx of x[b,ci, oy*s+ky-p, ox*s+kx-p] * w[co,ci,ky,kx].
pub fn naive_conv2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: usize,
    pad: OraclePad,
) -> Tensor<E> {
    let (b, cin, h, wd) = x.dims4().unwrap();
    let ws = w.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![E::zero(); b * cout * oh * ow];
    for bi in 0..b {
        let xs = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                let xv = read_padded(xs, (cin, h, wd), ci, iy, ix, pad);
                                acc += xv * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, oh, ow], out).unwrap()
}

/// Direct transposed convolution by scatter-add:
/// out[b,co, iy*s+ky-p, ix*s+kx-p] += x[b,ci,iy,ix] * w[ci,co,ky,kx].
pub fn naive_conv2d_transpose<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Tensor<E> {
    let (b, cin, h, wd) = x.dims4().unwrap();
    let ws = w.shape();
    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
    let oh = (h - 1) * stride + kh - 2 * padding;
    let ow = (wd - 1) * stride + kw - 2 * padding;
    let mut out = vec![E::zero(); b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for v in &mut out[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow] {
                *v = bias.data()[co];
            }
        }
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.data()[((bi * cin + ci) * h + iy) * wd + ix];
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - padding as isize;
                                let ox = (ix * stride + kx) as isize - padding as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    out[((bi * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                        xv * w.data()[((ci * cout + co) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, oh, ow], out).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<E: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::from_f64(rng.gen_range(-1.0..1.0))).unwrap()
}

pub fn max_abs_diff<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "oracle comparison shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

/// Central-difference step per dtype.
pub fn fd_step<E: Element>() -> f64 {
    match E::DTYPE {
        mustgan_core::Dtype::F32 => 1e-3,
        mustgan_core::Dtype::F64 => 1e-6,
    }
}

/// Smoothness threshold for the step-halving check below.
pub fn fd_smooth_tol<E: Element>() -> f64 {
    match E::DTYPE {
        mustgan_core::Dtype::F32 => 1e-4,
        mustgan_core::Dtype::F64 => 1e-7,
    }
}

/// Central difference with step-halving validation: evaluates the
/// difference quotient at `h` and `h/2` and returns `None` when they
/// disagree, which flags a subgradient kink (relu-style) straddled by
/// the stencil where central differences are not a valid oracle.
pub fn fd_or_skip<E: Element>(eval: impl Fn(f64) -> f64, base: f64) -> Option<f64> {
    fd_or_skip_with::<E>(eval, base, fd_step::<E>())
}

/// [`fd_or_skip`] with an explicit step. Deep fp32 compositions need a
/// larger step than single ops so forward rounding noise stays well
/// below the difference quotient.
pub fn fd_or_skip_with<E: Element>(
    eval: impl Fn(f64) -> f64,
    base: f64,
    h: f64,
) -> Option<f64> {
    let fd1 = (eval(base + h) - eval(base - h)) / (2.0 * h);
    let fd2 = (eval(base + h / 2.0) - eval(base - h / 2.0)) / h;
    let gap = (fd1 - fd2).abs() / 1.0f64.max(fd1.abs()).max(fd2.abs());
    if gap > fd_smooth_tol::<E>() {
        None
    } else {
        Some(fd2)
    }
}

/// Step used by the composed-network probes.
pub fn fd_step_composed<E: Element>() -> f64 {
    fd_step::<E>()
}

/// max over checked coordinates of |analytic - fd| / max(1, |analytic|, |fd|).
///
/// `f` evaluates the scalar loss from the full input list; `analytic` is the
/// gradient under test for input `arg`. Checks `coords` coordinates
/// (all when the tensor is small); kink-straddling coordinates are
/// excluded by the step-halving validation.
pub fn fd_max_rel_err<E: Element>(
    f: &dyn Fn(&[Tensor<E>]) -> f64,
    inputs: &[Tensor<E>],
    arg: usize,
    analytic: &Tensor<E>,
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let n = inputs[arg].numel();
    let picks: Vec<usize> = if n <= coords {
        (0..n).collect()
    } else {
        (0..coords).map(|_| rng.gen_range(0..n)).collect()
    };
    let mut worst = 0.0f64;
    for idx in picks {
        let base = inputs[arg].data()[idx].to_f64();
        let eval = |v: f64| {
            let mut moved = inputs.to_vec();
            moved[arg] = inputs[arg].with_value_at(idx, E::from_f64(v));
            f(&moved)
        };
        let Some(fd) = fd_or_skip::<E>(eval, base) else {
            continue;
        };
        let an = analytic.data()[idx].to_f64();
        let rel = (an - fd).abs() / 1.0f64.max(an.abs()).max(fd.abs());
        worst = worst.max(rel);
    }
    worst
}

/// Independent scalar Adam trace (bias-corrected), for freezing optimizer
/// expectations.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl ScalarAdam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        ScalarAdam {
            m: 0.0,
            v: 0.0,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Returns the updated parameter.
    pub fn step(&mut self, param: f64, grad: f64, lr: f64) -> f64 {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad;
        let mh = self.m / (1.0 - self.beta1.powi(self.t as i32));
        let vh = self.v / (1.0 - self.beta2.powi(self.t as i32));
        param - lr * mh / (vh.sqrt() + self.eps)
    }
}

/// One randomized conv2d parameterization (both padding modes, strides
/// 1..2) compared against the naive oracle; returns the max abs diff.
pub fn conv_oracle_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.gen_range(1..3usize);
    let cin = r.gen_range(1..4usize);
    let cout = r.gen_range(1..5usize);
    let k = r.gen_range(1..4usize);
    let stride = r.gen_range(1..3usize);
    let padding = r.gen_range(0..=k.min(2));
    let h = r.gen_range(k.max(3)..9usize);
    let w = r.gen_range(k.max(3)..9usize);
    let reflect_ok = padding < h && padding < w;
    let mode = if reflect_ok && r.gen_bool(0.5) {
        (PadMode::Reflect, OraclePad::Reflect)
    } else {
        (PadMode::Zero, OraclePad::Zero)
    };

    let x = random_tensor::<f64>(&mut r, vec![b, cin, h, w]);
    let wt = random_tensor::<f64>(&mut r, vec![cout, cin, k, k]);
    let bias = random_tensor::<f64>(&mut r, vec![cout]);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(wt.clone());
    let bv = tape.constant(bias.clone());
    let y = tape.conv2d(xv, wv, bv, stride, padding, mode.0).unwrap();
    let expected = naive_conv2d(&x, &wt, &bias, stride, padding, mode.1);
    max_abs_diff(tape.value(y), &expected)
}

/// One randomized conv2d_transpose parameterization against the
/// scatter-add oracle; returns the max abs diff.
pub fn convt_oracle_case(seed: u64) -> f64 {
    let mut r = rng(seed ^ 0xABCD);
    let b = r.gen_range(1..3usize);
    let cin = r.gen_range(1..4usize);
    let cout = r.gen_range(1..4usize);
    let k = r.gen_range(1..5usize);
    let stride = r.gen_range(1..3usize);
    let max_pad = ((k.saturating_sub(1)) / 2).min(1);
    let padding = r.gen_range(0..=max_pad);
    let h = r.gen_range(2..7usize);
    let w = r.gen_range(2..7usize);

    let x = random_tensor::<f64>(&mut r, vec![b, cin, h, w]);
    let wt = random_tensor::<f64>(&mut r, vec![cin, cout, k, k]);
    let bias = random_tensor::<f64>(&mut r, vec![cout]);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(wt.clone());
    let bv = tape.constant(bias.clone());
    let y = tape.conv2d_transpose(xv, wv, bv, stride, padding).unwrap();
    let expected = naive_conv2d_transpose(&x, &wt, &bias, stride, padding);
    max_abs_diff(tape.value(y), &expected)
}
